//! Finite-difference suite over every differentiable building block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttnVars, CgVars, Prompt, CG_KERNEL};
use crate::data::BatchPartition;
use crate::oda::{self, BatchStats, DistanceConfig, Metric, TwinRows};
use crate::tensor::gradcheck::{randn, run_case, tensor_op_suite, GradCheckReport, INSTANCES};
use crate::tensor::{Result, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;

type Boxed = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Inputs `[x, wq, wk, wv, wo, prompt_key, prompt_value]` for a `[T, D]` instance.
fn attention_inputs(r: &mut ChaCha8Rng) -> (Vec<Tensor>, usize) {
    let heads = r.gen_range(1..=2);
    let d = heads * r.gen_range(1..=2);
    let (t, lp) = (r.gen_range(2..=4), r.gen_range(1..=3));
    let s = 1.0 / (d as f64).sqrt();
    let mut ins = vec![randn(r, &[t, d], 1.0)];
    ins.extend((0..4).map(|_| randn(r, &[d, d], s)));
    ins.push(randn(r, &[lp, d], 1.0));
    ins.push(randn(r, &[lp, d], 1.0));
    (ins, heads)
}

fn attn(v: &[Var], heads: usize) -> (AttnVars, Prompt) {
    (
        AttnVars { wq: v[1], wk: v[2], wv: v[3], wo: v[4], heads },
        Prompt { key: v[5], value: v[6] },
    )
}

fn cg_inputs(r: &mut ChaCha8Rng, d: usize, heads: usize) -> Vec<Tensor> {
    let dh = d / heads;
    let mut ins: Vec<Tensor> = (0..heads).map(|_| randn(r, &[CG_KERNEL, dh, dh], 0.5)).collect();
    ins.push(randn(r, &[d, 2 * d], 0.5));
    ins.push(randn(r, &[2 * d], 0.5));
    ins.push(randn(r, &[2 * d, d], 0.5));
    ins.push(randn(r, &[d], 0.5));
    ins.push(randn(r, &[CG_KERNEL, d, d], 0.5));
    ins
}

fn cg_vars(v: &[Var], heads: usize) -> CgVars {
    CgVars {
        head_convs: v[..heads].to_vec(),
        mlp_w1: v[heads],
        mlp_b1: v[heads + 1],
        mlp_w2: v[heads + 2],
        mlp_b2: v[heads + 3],
        global_conv: v[heads + 4],
    }
}

/// `[b, d]` rows with norm at least 0.5, where the normalisation is well conditioned.
fn away_from_origin(r: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
    loop {
        let t = randn(r, &[b, d], 1.0);
        if (0..b).all(|i| t.row(i).iter().map(|v| v * v).sum::<f64>() >= 0.25) {
            return t;
        }
    }
}

fn random_states(r: &mut ChaCha8Rng, n: usize) -> BatchPartition {
    let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let yc: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
    BatchPartition::from_labels(&y, &yc)
}

/// Attention variants and aggregation-loss pieces.
pub fn composite_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let n = INSTANCES;
    let mut out = Vec::new();
    out.push(run_case("self_attention", TOLERANCE, n, seed + 1, |r| {
        let (ins, h) = attention_inputs(r);
        (ins, Box::new(move |t: &mut Tape, v: &[Var]| attention::self_attention(t, v[0], &attn(v, h).0)) as Boxed)
    })?);
    out.push(run_case("prompt_msa", TOLERANCE, n, seed + 2, |r| {
        let (ins, h) = attention_inputs(r);
        (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
            let (a, p) = attn(v, h);
            attention::prompt_msa(t, v[0], &p, &a)
        }) as Boxed)
    })?);
    out.push(run_case("residual_guidance", TOLERANCE, n, seed + 3, |r| {
        let (ins, h) = attention_inputs(r);
        (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
            let (a, p) = attn(v, h);
            attention::residual_guidance(t, v[0], &p, &a)
        }) as Boxed)
    })?);
    out.push(run_case("coordination_guidance", TOLERANCE, n, seed + 4, |r| {
        let (mut ins, h) = attention_inputs(r);
        let d = ins[0].shape()[1];
        ins.extend(cg_inputs(r, d, h));
        (ins, Box::new(move |t: &mut Tape, v: &[Var]| {
            let (a, p) = attn(v, h);
            let rg = attention::residual_guidance(t, v[0], &p, &a)?;
            attention::coordination_guidance(t, rg, v[0], &p, &a, &cg_vars(&v[7..], h))
        }) as Boxed)
    })?);
    out.push(run_case("psi", TOLERANCE, n, seed + 5, |r| {
        let (b, d) = (r.gen_range(1..=4), r.gen_range(2..=5));
        (vec![away_from_origin(r, b, d)], Box::new(|t: &mut Tape, v: &[Var]| Ok(oda::psi(t, v[0]))) as Boxed)
    })?);
    out.push(run_case("centers", TOLERANCE, n, seed + 6, |r| {
        let (b, d) = (r.gen_range(2..=8), r.gen_range(2..=4));
        let part = random_states(r, b);
        (vec![away_from_origin(r, b, d)], Box::new(move |t: &mut Tape, v: &[Var]| {
            let set = oda::centers(t, v[0], &part)?;
            let present: Vec<Var> = set.centers.iter().flatten().flatten().copied().collect();
            t.concat(&present, 0)
        }) as Boxed)
    })?);
    for (name, p) in [("d_p_l1", 1.0), ("d_p_l2", 2.0), ("d_p_l3", 3.0)] {
        out.push(run_case(name, TOLERANCE, n, seed + 7 + p as u64, |r| {
            let d = r.gen_range(2..=6);
            let st = BatchStats::of(&randn(r, &[6, d], 1.0));
            let cfg = DistanceConfig { p, ..Default::default() };
            let ins = vec![randn(r, &[d], 1.0), randn(r, &[d], 1.0)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| oda::d_p(t, v[0], v[1], &cfg, &st)) as Boxed)
        })?);
    }
    for (name, metric) in [("similarity", Metric::Minkowski), ("similarity_cosine", Metric::Cosine)] {
        out.push(run_case(name, TOLERANCE, n, seed + 11, |r| {
            let d = r.gen_range(2..=5);
            let st = BatchStats::of(&randn(r, &[6, d], 1.0));
            let cfg = DistanceConfig { metric, tau: r.gen_range(0.5..2.0), ..Default::default() };
            let ins = vec![randn(r, &[d], 1.0), randn(r, &[d], 1.0)];
            (ins, Box::new(move |t: &mut Tape, v: &[Var]| oda::similarity_s(t, v[0], v[1], &cfg, &st)) as Boxed)
        })?);
    }
    out.push(run_case("hsic", TOLERANCE, n, seed + 13, |r| {
        let (m, d) = (r.gen_range(3..=7), r.gen_range(1..=3));
        let ins = vec![randn(r, &[m, d], 1.0), randn(r, &[m, d], 1.0)];
        (ins, Box::new(|t: &mut Tape, v: &[Var]| Ok(oda::hsic(t, v[0], v[1])?.expect("at least two rows"))) as Boxed)
    })?);
    out.push(run_case("l_dis", TOLERANCE, n, seed + 14, |r| {
        let (pairs, d) = (r.gen_range(2..=4), r.gen_range(2..=4));
        let b = 2 * pairs + 4;
        // rows 0..pairs raw twins, pairs..2·pairs their compressed twins, then unpaired raw rows
        let y: Vec<u8> = (0..b).map(|i| if i < 2 * pairs { ((i % pairs) % 2) as u8 } else { (i % 2) as u8 }).collect();
        let yc: Vec<u8> = (0..b).map(|i| u8::from((pairs..2 * pairs).contains(&i))).collect();
        let part = BatchPartition::from_labels(&y, &yc);
        let twins: Vec<TwinRows> = (0..pairs).map(|i| TwinRows { raw: i, compressed: i + pairs, y: y[i] }).collect();
        let x = away_from_origin(r, b, d);
        let st = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let p = oda::psi(&mut t, v);
            BatchStats::of(t.value(p))
        };
        let beta = r.gen_range(0.5..1.0);
        (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| {
            let cfg = DistanceConfig::default();
            Ok(oda::l_dis_with_stats(t, v[0], &part, &twins, &cfg, beta, Some(&st))?.expect("terms present").total)
        }) as Boxed)
    })?);
    Ok(out)
}

/// Every tape op followed by the composite blocks.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = tensor_op_suite(seed)?;
    out.extend(composite_suite(seed.wrapping_add(1 << 20))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_blocks_pass() {
        for r in composite_suite(0).unwrap() {
            assert!(r.passed(), "{}", r.line());
            assert!(r.instances >= 20);
        }
    }
}
