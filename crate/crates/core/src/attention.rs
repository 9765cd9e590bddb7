//! Attention variants over token sequences and the guide prompt pool.
//!
//! Every function accepts token tensors shaped `[T, D]` or `[B, T, D]`;
//! prompts are always `[L_p, D]` and are shared across the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

fn config_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Config { op, msg: msg.into() })
}

/// Query/key/value/output projections of one attention layer, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// Parameter ids of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return config_err("attention", format!("embedding dim {dim} is not divisible by {heads} heads"));
        }
        let mut w = |n: &str| store.add(format!("{prefix}.{n}"), nn::linear_weight(rng, dim, dim));
        Ok(AttentionParams {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
            heads,
        })
    }

    pub fn vars(&self, b: &Bound) -> AttnVars {
        AttnVars {
            wq: b[self.wq],
            wk: b[self.wk],
            wv: b[self.wv],
            wo: b[self.wo],
            heads: self.heads,
        }
    }
}

/// Convolution and MLP weights that coordination guidance adds on top of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CgParams {
    pub head_convs: Vec<ParamId>,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub global_conv: ParamId,
}

#[derive(Clone, Debug)]
pub struct CgVars {
    pub head_convs: Vec<Var>,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub global_conv: Var,
}

pub const CG_KERNEL: usize = 3;

impl CgParams {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        let dh = dim / heads;
        let head_convs = (0..heads)
            .map(|i| store.add(format!("{prefix}.head_conv{i}"), nn::conv_weight(rng, CG_KERNEL, dh, dh)))
            .collect();
        CgParams {
            head_convs,
            mlp_w1: store.add(format!("{prefix}.mlp_w1"), nn::linear_weight(rng, dim, 2 * dim)),
            mlp_b1: store.add(format!("{prefix}.mlp_b1"), Tensor::zeros(&[2 * dim])),
            mlp_w2: store.add(format!("{prefix}.mlp_w2"), nn::linear_weight(rng, 2 * dim, dim)),
            mlp_b2: store.add(format!("{prefix}.mlp_b2"), Tensor::zeros(&[dim])),
            global_conv: store.add(format!("{prefix}.global_conv"), nn::conv_weight(rng, CG_KERNEL, dim, dim)),
        }
    }

    pub fn vars(&self, b: &Bound) -> CgVars {
        CgVars {
            head_convs: self.head_convs.iter().map(|&p| b[p]).collect(),
            mlp_w1: b[self.mlp_w1],
            mlp_b1: b[self.mlp_b1],
            mlp_w2: b[self.mlp_w2],
            mlp_b2: b[self.mlp_b2],
            global_conv: b[self.global_conv],
        }
    }
}

/// A selected key/value prompt pair, each `[L_p, D]`.
#[derive(Clone, Copy, Debug)]
pub struct Prompt {
    pub key: Var,
    pub value: Var,
}

/// Lifts `[T, D]` to `[1, T, D]`; reports whether it did.
fn batched(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    match tape.shape(x).len() {
        3 => Ok((x, false)),
        2 => {
            let s = tape.shape(x).to_vec();
            Ok((tape.reshape(x, &[1, s[0], s[1]])?, true))
        }
        _ => config_err("attention", format!("tokens must be [T, D] or [B, T, D], got {:?}", tape.shape(x))),
    }
}

fn unbatched(tape: &mut Tape, x: Var, squeeze: bool) -> Result<Var> {
    if !squeeze {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    tape.reshape(x, &s[1..])
}

/// `[B, T, D] -> [B·H, T, D/H]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, t, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, t, d / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let x = tape.reshape(x, &[batch, heads, t, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch, t, heads * dh])
}

/// Multi-head attention on already-projected `q`, `k`, `v` (`[B, T, D]`),
/// followed by the output projection. Also returns the attention weights
/// `[B·H, T_q, T_k]`.
pub fn msa_with_weights(tape: &mut Tape, q: Var, k: Var, v: Var, a: &AttnVars) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(TensorError::Shape {
            op: "msa",
            lhs: qs,
            rhs: ks,
        });
    }
    let (batch, dim) = (qs[0], qs[2]);
    if a.heads == 0 || dim % a.heads != 0 {
        return config_err("msa", format!("embedding dim {dim} is not divisible by {} heads", a.heads));
    }
    let scale = 1.0 / ((dim / a.heads) as f64).sqrt();
    let (qh, kh, vh) = (
        split_heads(tape, q, a.heads)?,
        split_heads(tape, k, a.heads)?,
        split_heads(tape, v, a.heads)?,
    );
    let scores = tape.matmul_t(qh, kh, false, true)?;
    let scores = tape.scale(scores, scale);
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, vh)?;
    let ctx = merge_heads(tape, ctx, batch, a.heads)?;
    Ok((tape.linear(ctx, a.wo, None)?, weights))
}

/// [`msa_with_weights`] without the weights; accepts `[T, D]` or `[B, T, D]`.
pub fn msa(tape: &mut Tape, q: Var, k: Var, v: Var, a: &AttnVars) -> Result<Var> {
    let (q, squeeze) = batched(tape, q)?;
    let (k, _) = batched(tape, k)?;
    let (v, _) = batched(tape, v)?;
    let (out, _) = msa_with_weights(tape, q, k, v, a)?;
    unbatched(tape, out, squeeze)
}

/// `f_Q(x), f_K(x), f_V(x)` for `[B, T, D]` tokens.
#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn project_qkv(tape: &mut Tape, x: Var, a: &AttnVars) -> Result<Qkv> {
    Ok(Qkv {
        q: tape.linear(x, a.wq, None)?,
        k: tape.linear(x, a.wk, None)?,
        v: tape.linear(x, a.wv, None)?,
    })
}

fn per_batch(tape: &mut Tape, p: Var, batch: usize) -> Var {
    tape.broadcast_lead(p, batch)
}

/// Plain self-attention `msa(f_Q(x), f_K(x), f_V(x))`.
pub fn self_attention(tape: &mut Tape, x: Var, a: &AttnVars) -> Result<Var> {
    let (x, squeeze) = batched(tape, x)?;
    let p = project_qkv(tape, x, a)?;
    let (out, _) = msa_with_weights(tape, p.q, p.k, p.v, a)?;
    unbatched(tape, out, squeeze)
}

pub(crate) fn prompt_msa_qkv(tape: &mut Tape, p: &Qkv, prompt: &Prompt, a: &AttnVars) -> Result<Var> {
    let batch = tape.shape(p.q)[0];
    let pk = per_batch(tape, prompt.key, batch);
    let pv = per_batch(tape, prompt.value, batch);
    // prompts join the keys/values after projection, unprojected
    let k = tape.concat(&[p.k, pk], 1)?;
    let v = tape.concat(&[p.v, pv], 1)?;
    Ok(msa_with_weights(tape, p.q, k, v, a)?.0)
}

/// Prompt-augmented attention: raw prompts appended to the projected keys and values.
pub fn prompt_msa(tape: &mut Tape, x: Var, prompt: &Prompt, a: &AttnVars) -> Result<Var> {
    let (x, squeeze) = batched(tape, x)?;
    let p = project_qkv(tape, x, a)?;
    let out = prompt_msa_qkv(tape, &p, prompt, a)?;
    unbatched(tape, out, squeeze)
}

pub(crate) fn residual_guidance_qkv(tape: &mut Tape, p: &Qkv, prompt: &Prompt, a: &AttnVars) -> Result<Var> {
    let batch = tape.shape(p.q)[0];
    let base = msa_with_weights(tape, p.q, p.k, p.v, a)?.0;
    let pk = tape.linear(prompt.key, a.wk, None)?;
    let pv = tape.linear(prompt.value, a.wv, None)?;
    let pk = per_batch(tape, pk, batch);
    let pv = per_batch(tape, pv, batch);
    let guided = msa_with_weights(tape, p.q, pk, pv, a)?.0;
    tape.add(base, guided)
}

/// Residual guidance: self-attention plus attention over the projected prompts.
pub fn residual_guidance(tape: &mut Tape, x: Var, prompt: &Prompt, a: &AttnVars) -> Result<Var> {
    let (x, squeeze) = batched(tape, x)?;
    let p = project_qkv(tape, x, a)?;
    let out = residual_guidance_qkv(tape, &p, prompt, a)?;
    unbatched(tape, out, squeeze)
}

/// Prompt-modulated keys `F_K` and values `F_V`, each `[B, L_p, D]`.
pub fn guidance_features(tape: &mut Tape, h: Var, prompt: &Prompt, cg: &CgVars) -> Result<(Var, Var)> {
    let s = tape.shape(h).to_vec();
    let (batch, dim) = (s[0], s[2]);
    let heads = cg.head_convs.len();
    let lp = tape.shape(prompt.key)[0];
    if heads == 0 || dim % heads != 0 {
        return config_err("coordination_guidance", format!("{dim} channels cannot split into {heads} heads"));
    }
    let dh = dim / heads;
    let pad = CG_KERNEL / 2;

    let mut per_head = Vec::with_capacity(heads);
    for (i, &w) in cg.head_convs.iter().enumerate() {
        let slice = tape.slice(h, 2, i * dh, dh)?;
        per_head.push(tape.conv1d(slice, w, 1, pad)?);
    }
    let specific = tape.concat(&per_head, 2)?;
    let specific = tape.adaptive_avg_pool(specific, lp)?;
    let pk = per_batch(tape, prompt.key, batch);
    let f_k = tape.mul(pk, specific)?;

    let hidden = tape.linear(h, cg.mlp_w1, Some(cg.mlp_b1))?;
    let hidden = tape.gelu(hidden);
    let generic = tape.linear(hidden, cg.mlp_w2, Some(cg.mlp_b2))?;
    let generic = tape.conv1d(generic, cg.global_conv, 1, pad)?;
    let generic = tape.adaptive_avg_pool(generic, lp)?;
    let pv = per_batch(tape, prompt.value, batch);
    let f_v = tape.mul(pv, generic)?;
    Ok((f_k, f_v))
}

pub(crate) fn coordination_guidance_qkv(
    tape: &mut Tape,
    h_rg: Var,
    p: &Qkv,
    prompt: &Prompt,
    a: &AttnVars,
    cg: &CgVars,
) -> Result<Var> {
    let (f_k, f_v) = guidance_features(tape, h_rg, prompt, cg)?;
    let k = tape.concat(&[p.k, f_k], 1)?;
    let v = tape.concat(&[p.v, f_v], 1)?;
    Ok(msa_with_weights(tape, p.q, k, v, a)?.0)
}

/// Coordination guidance: attention of the layer input `x` over its own keys and
/// values extended by guidance features derived from `h_rg`.
pub fn coordination_guidance(
    tape: &mut Tape,
    h_rg: Var,
    x: Var,
    prompt: &Prompt,
    a: &AttnVars,
    cg: &CgVars,
) -> Result<Var> {
    let (h_rg, _) = batched(tape, h_rg)?;
    let (x, squeeze) = batched(tape, x)?;
    if tape.shape(h_rg) != tape.shape(x) {
        return Err(TensorError::Shape {
            op: "coordination_guidance",
            lhs: tape.shape(h_rg).to_vec(),
            rhs: tape.shape(x).to_vec(),
        });
    }
    let p = project_qkv(tape, x, a)?;
    let out = coordination_guidance_qkv(tape, h_rg, &p, prompt, a, cg)?;
    unbatched(tape, out, squeeze)
}

/// How a prompt is drawn from the pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectMode {
    Random,
    BeamSearch,
    FullAverage,
    HalfAverage,
}

/// Training-time and inference-time selection modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSelection {
    pub train: SelectMode,
    pub infer: SelectMode,
}

impl Default for PromptSelection {
    fn default() -> Self {
        PromptSelection {
            train: SelectMode::Random,
            infer: SelectMode::FullAverage,
        }
    }
}

impl PromptSelection {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.train, SelectMode::FullAverage | SelectMode::HalfAverage) {
            return config_err("prompt_selection", "training selects Random or BeamSearch");
        }
        if self.infer == SelectMode::BeamSearch {
            return config_err("prompt_selection", "inference selects Random, FullAverage or HalfAverage");
        }
        Ok(())
    }

    /// Short code such as `R-FA`.
    pub fn code(&self) -> String {
        let c = |m: SelectMode| match m {
            SelectMode::Random => "R",
            SelectMode::BeamSearch => "B",
            SelectMode::FullAverage => "FA",
            SelectMode::HalfAverage => "HA",
        };
        format!("{}-{}", c(self.train), c(self.infer))
    }
}

impl std::str::FromStr for PromptSelection {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        let mode = |c: &str| match c {
            "R" => Ok(SelectMode::Random),
            "B" => Ok(SelectMode::BeamSearch),
            "FA" => Ok(SelectMode::FullAverage),
            "HA" => Ok(SelectMode::HalfAverage),
            _ => config_err("prompt_selection", format!("unknown selection code {c:?}")),
        };
        let (t, i) = s
            .split_once('-')
            .ok_or_else(|| TensorError::Config {
                op: "prompt_selection",
                msg: format!("expected TRAIN-INFER such as R-FA, got {s:?}"),
            })?;
        let sel = PromptSelection {
            train: mode(t)?,
            infer: mode(i)?,
        };
        sel.validate()?;
        Ok(sel)
    }
}

/// Which pool entries make up the prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptChoice {
    Entry(usize),
    Mean(Vec<usize>),
}

/// Picks pool entries. `score` rates entry `i` (lower is better) and is
/// required by [`SelectMode::BeamSearch`] only.
pub fn choose<R: Rng>(
    pool_size: usize,
    mode: SelectMode,
    rng: &mut R,
    score: Option<&mut dyn FnMut(usize) -> Result<f64>>,
) -> Result<PromptChoice> {
    if pool_size == 0 {
        return config_err("select_prompt", "prompt pool is empty");
    }
    Ok(match mode {
        SelectMode::Random => PromptChoice::Entry(rng.gen_range(0..pool_size)),
        SelectMode::FullAverage => PromptChoice::Mean((0..pool_size).collect()),
        SelectMode::HalfAverage => PromptChoice::Mean((0..pool_size.div_ceil(2)).collect()),
        SelectMode::BeamSearch => {
            let score = match score {
                Some(s) => s,
                None => return config_err("select_prompt", "beam search needs a scoring function"),
            };
            let mut best = (0, f64::INFINITY);
            for i in 0..pool_size {
                let s = score(i)?;
                if s < best.1 {
                    best = (i, s);
                }
            }
            PromptChoice::Entry(best.0)
        }
    })
}

/// Per-layer pool of `N` learnable key/value prompt pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidePromptPool {
    pub keys: Vec<ParamId>,
    pub values: Vec<ParamId>,
}

pub const PROMPT_INIT_STD: f64 = 0.02;

impl GuidePromptPool {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, size: usize, len: usize, dim: usize, rng: &mut R) -> Self {
        let mut keys = Vec::with_capacity(size);
        let mut values = Vec::with_capacity(size);
        for i in 0..size {
            keys.push(store.add(format!("{prefix}.key{i}"), nn::normal(rng, &[len, dim], PROMPT_INIT_STD)));
            values.push(store.add(format!("{prefix}.value{i}"), nn::normal(rng, &[len, dim], PROMPT_INIT_STD)));
        }
        GuidePromptPool { keys, values }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Builds the chosen prompt on the tape.
    pub fn materialize(&self, tape: &mut Tape, b: &Bound, choice: &PromptChoice) -> Result<Prompt> {
        let pick = |ids: &[ParamId], tape: &mut Tape| -> Result<Var> {
            match choice {
                PromptChoice::Entry(i) => ids
                    .get(*i)
                    .map(|&p| b[p])
                    .ok_or_else(|| TensorError::Config {
                        op: "select_prompt",
                        msg: format!("entry {i} outside a pool of {}", ids.len()),
                    }),
                PromptChoice::Mean(idx) => {
                    if idx.is_empty() || idx.iter().any(|&i| i >= ids.len()) {
                        return config_err("select_prompt", "bad averaging subset");
                    }
                    let mut acc = b[ids[idx[0]]];
                    for &i in &idx[1..] {
                        acc = tape.add(acc, b[ids[i]])?;
                    }
                    Ok(if idx.len() > 1 { tape.scale(acc, 1.0 / idx.len() as f64) } else { acc })
                }
            }
        };
        Ok(Prompt {
            key: pick(&self.keys, tape)?,
            value: pick(&self.values, tape)?,
        })
    }

    /// Value-level selection: returns the key and value tensors of the chosen prompt.
    pub fn select<R: Rng>(&self, store: &ParamStore, mode: SelectMode, rng: &mut R) -> Result<(Tensor, Tensor)> {
        let choice = choose(self.len(), mode, rng, None)?;
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let p = self.materialize(&mut tape, &b, &choice)?;
        Ok((tape.value(p.key).clone(), tape.value(p.value).clone()))
    }
}
