//! Nested-loop reimplementations of the attention variants.

use plada_core::attention::{
    coordination_guidance, prompt_msa, residual_guidance, self_attention, AttentionParams, CgParams,
    GuidePromptPool, PromptChoice,
};
use plada_core::nn::ParamStore;
use plada_core::tensor::gradcheck::randn;
use plada_core::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> M {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn mm(a: &M, b: &M) -> M {
    (0..a.len())
        .map(|i| (0..b[0].len()).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn hadamard(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x * y).collect()).collect()
}

pub fn cols(a: &M, start: usize, len: usize) -> M {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Per-head softmax attention on projected inputs, then the output projection.
pub fn attention(q: &M, k: &M, v: &M, wo: &M, heads: usize) -> M {
    let d = q[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let mut s: Vec<f64> = (0..k.len())
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            s.iter_mut().for_each(|x| *x = (*x - m).exp());
            let z: f64 = s.iter().sum();
            for c in 0..dh {
                ctx[i][h * dh + c] = (0..k.len()).map(|j| s[j] / z * v[j][h * dh + c]).sum();
            }
        }
    }
    mm(&ctx, wo)
}

pub fn conv(x: &M, w: &Tensor) -> M {
    let (k, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let wd = w.data();
    let pad = (k / 2) as isize;
    (0..x.len())
        .map(|t| {
            (0..cout)
                .map(|o| {
                    let mut s = 0.0;
                    for j in 0..k {
                        let src = t as isize + j as isize - pad;
                        if src < 0 || src >= x.len() as isize {
                            continue;
                        }
                        for c in 0..cin {
                            s += x[src as usize][c] * wd[(j * cin + c) * cout + o];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn pool(x: &M, out: usize) -> M {
    let n = x.len();
    (0..out)
        .map(|i| {
            let (s, e) = (i * n / out, ((i + 1) * n).div_ceil(out));
            (0..x[0].len())
                .map(|c| (s..e).map(|t| x[t][c]).sum::<f64>() / (e - s) as f64)
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn affine(x: &M, w: &Tensor, b: &Tensor) -> M {
    mm(x, &mat(w)).into_iter().map(|r| r.iter().zip(b.data()).map(|(v, c)| v + c).collect()).collect()
}

pub fn vcat(a: &M, b: &M) -> M {
    a.iter().chain(b).cloned().collect()
}

pub fn max_diff(a: &M, t: &Tensor) -> f64 {
    a.iter().flatten().zip(t.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub struct Fixture {
    pub store: ParamStore,
    pub attn: AttentionParams,
    pub cg: CgParams,
    pub pool: GuidePromptPool,
    pub x: Tensor,
}

pub fn fixture(dim: usize, heads: usize, tokens: usize, lp: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "attn", dim, heads, &mut rng).unwrap();
    let cg = CgParams::new(&mut store, "cg", dim, heads, &mut rng);
    let pool = GuidePromptPool::new(&mut store, "pool", 1, lp, dim, &mut rng);
    // prompts at unit scale so the injected rows matter numerically
    for id in pool.keys.iter().chain(&pool.values) {
        *store.get_mut(*id) = randn(&mut rng, &[lp, dim], 1.0);
    }
    for id in [cg.mlp_b1, cg.mlp_b2] {
        let n = store.get(id).numel();
        *store.get_mut(id) = randn(&mut rng, &[n], 0.5);
    }
    let x = randn(&mut rng, &[tokens, dim], 1.0);
    Fixture { store, attn, cg, pool, x }
}

impl Fixture {
    pub fn p(&self, id: plada_core::nn::ParamId) -> M {
        mat(self.store.get(id))
    }

    pub fn qkv(&self, x: &M) -> (M, M, M) {
        (mm(x, &self.p(self.attn.wq)), mm(x, &self.p(self.attn.wk)), mm(x, &self.p(self.attn.wv)))
    }

    pub fn prompt(&self) -> (M, M) {
        (self.p(self.pool.keys[0]), self.p(self.pool.values[0]))
    }

    pub fn naive_rg(&self, x: &M) -> M {
        let (q, k, v) = self.qkv(x);
        let wo = self.p(self.attn.wo);
        let (pk, pv) = self.prompt();
        let own = attention(&q, &k, &v, &wo, self.attn.heads);
        let guided = attention(&q, &mm(&pk, &self.p(self.attn.wk)), &mm(&pv, &self.p(self.attn.wv)), &wo, self.attn.heads);
        add(&own, &guided)
    }

    pub fn naive_cg(&self, h: &M, x: &M) -> M {
        let heads = self.attn.heads;
        let d = x[0].len();
        let dh = d / heads;
        let (pk, pv) = self.prompt();
        let lp = pk.len();
        let mut specific = vec![Vec::new(); h.len()];
        for i in 0..heads {
            let out = conv(&cols(h, i * dh, dh), self.store.get(self.cg.head_convs[i]));
            for (row, o) in specific.iter_mut().zip(out) {
                row.extend(o);
            }
        }
        let f_k = hadamard(&pk, &pool(&specific, lp));
        let hidden: M = affine(h, self.store.get(self.cg.mlp_w1), self.store.get(self.cg.mlp_b1))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let generic = affine(&hidden, self.store.get(self.cg.mlp_w2), self.store.get(self.cg.mlp_b2));
        let generic = conv(&generic, self.store.get(self.cg.global_conv));
        let f_v = hadamard(&pv, &pool(&generic, lp));
        let (q, k, v) = self.qkv(x);
        attention(&q, &vcat(&k, &f_k), &vcat(&v, &f_v), &self.p(self.attn.wo), heads)
    }
}

/// Plain and prompt-augmented MSA against the nested loops: `(plain, prompted)` max errors.
pub fn msa_errors(dim: usize, heads: usize, seed: u64) -> (f64, f64) {
    let f = fixture(dim, heads, 6, 2, seed);
    let mut tape = Tape::new();
    let b = f.store.bind(&mut tape, false);
    let av = f.attn.vars(&b);
    let x = tape.constant(f.x.clone());
    let prompt = f.pool.materialize(&mut tape, &b, &PromptChoice::Entry(0)).unwrap();
    let plain = self_attention(&mut tape, x, &av).unwrap();
    let with_prompt = prompt_msa(&mut tape, x, &prompt, &av).unwrap();
    let xm = mat(&f.x);
    let (q, k, v) = f.qkv(&xm);
    let wo = f.p(f.attn.wo);
    let (pk, pv) = f.prompt();
    let naive = attention(&q, &vcat(&k, &pk), &vcat(&v, &pv), &wo, heads);
    (
        max_diff(&attention(&q, &k, &v, &wo, heads), tape.value(plain)),
        max_diff(&naive, tape.value(with_prompt)),
    )
}

pub fn rg_error(dim: usize, heads: usize, tokens: usize, seed: u64) -> f64 {
    let f = fixture(dim, heads, tokens, 2, seed);
    let mut tape = Tape::new();
    let b = f.store.bind(&mut tape, false);
    let x = tape.constant(f.x.clone());
    let prompt = f.pool.materialize(&mut tape, &b, &PromptChoice::Entry(0)).unwrap();
    let rg = residual_guidance(&mut tape, x, &prompt, &f.attn.vars(&b)).unwrap();
    max_diff(&f.naive_rg(&mat(&f.x)), tape.value(rg))
}

/// RG followed by CG, as in a B2E layer.
pub fn cg_error(dim: usize, heads: usize, tokens: usize, lp: usize, seed: u64) -> f64 {
    let f = fixture(dim, heads, tokens, lp, seed);
    let mut tape = Tape::new();
    let b = f.store.bind(&mut tape, false);
    let av = f.attn.vars(&b);
    let x = tape.constant(f.x.clone());
    let prompt = f.pool.materialize(&mut tape, &b, &PromptChoice::Entry(0)).unwrap();
    let rg = residual_guidance(&mut tape, x, &prompt, &av).unwrap();
    let out = coordination_guidance(&mut tape, rg, x, &prompt, &av, &f.cg.vars(&b)).unwrap();
    let xm = mat(&f.x);
    max_diff(&f.naive_cg(&f.naive_rg(&xm), &xm), tape.value(out))
}
