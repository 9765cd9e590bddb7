//! Mini vision transformer with prompt-guided attention and two heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, choose, AttentionParams, CgParams, GuidePromptPool, Prompt, PromptChoice, Qkv, SelectMode,
};
use crate::data::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Attention variant run by one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Plain multi-head self-attention.
    Msa,
    /// Raw prompts appended to the keys and values.
    PromptMsa,
    /// Residual guidance.
    Rg,
    /// Plain attention followed by coordination guidance.
    MsaCg,
    /// Residual guidance followed by coordination guidance.
    RgCg,
}

impl LayerKind {
    pub fn uses_prompts(self) -> bool {
        !matches!(self, LayerKind::Msa)
    }

    pub fn uses_cg(self) -> bool {
        matches!(self, LayerKind::MsaCg | LayerKind::RgCg)
    }
}

/// Fixed preprocessing applied to the `[0, 1]` pixels before patch embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stem {
    #[default]
    Pixels,
    /// Residual against the 3×3 box mean (edges replicated), amplified by [`HIGH_PASS_GAIN`].
    HighPass,
}

pub const HIGH_PASS_GAIN: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    /// Leading layers that run `shallow`; the rest run `deep`.
    pub n_b2e: usize,
    /// Layers from this index on run plain attention; `None` keeps guidance in every layer.
    #[serde(default)]
    pub guided_depth: Option<usize>,
    pub pool_size: usize,
    pub prompt_len: usize,
    pub mlp_ratio: usize,
    pub shallow: LayerKind,
    pub deep: LayerKind,
    #[serde(default)]
    pub stem: Stem,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 8,
            dim: 128,
            heads: 4,
            patch: 8,
            n_b2e: 2,
            guided_depth: None,
            pool_size: 4,
            prompt_len: 32,
            mlp_ratio: 4,
            shallow: LayerKind::RgCg,
            deep: LayerKind::Rg,
            stem: Stem::Pixels,
        }
    }
}

impl BackboneConfig {
    /// The reduced profile used for the training-based acceptance runs.
    pub fn desk() -> Self {
        BackboneConfig {
            depth: 4,
            dim: 32,
            heads: 2,
            patch: 16,
            n_b2e: 2,
            pool_size: 4,
            prompt_len: 8,
            mlp_ratio: 2,
            stem: Stem::HighPass,
            ..Self::default()
        }
    }

    /// Plain transformer: no prompts, no guidance.
    pub fn plain(mut self) -> Self {
        self.shallow = LayerKind::Msa;
        self.deep = LayerKind::Msa;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("depth, dim, heads and mlp_ratio must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.patch == 0 || IMAGE_SIZE % self.patch != 0 {
            return bad(format!("patch {} must divide the image size {IMAGE_SIZE}", self.patch));
        }
        if self.n_b2e > self.depth {
            return bad(format!("n_b2e {} exceeds depth {}", self.n_b2e, self.depth));
        }
        if let Some(g) = self.guided_depth {
            if g < self.n_b2e || g > self.depth {
                return bad(format!("guided_depth {g} must lie between n_b2e {} and depth {}", self.n_b2e, self.depth));
            }
        }
        let prompted = self.layer_plan().iter().any(|k| k.uses_prompts());
        if prompted && (self.pool_size == 0 || self.prompt_len == 0) {
            return bad("prompted layers need pool_size and prompt_len >= 1".into());
        }
        Ok(())
    }

    pub fn layer_plan(&self) -> Vec<LayerKind> {
        let guided = self.guided_depth.unwrap_or(self.depth);
        (0..self.depth)
            .map(|i| match i {
                i if i < self.n_b2e => self.shallow,
                i if i < guided => self.deep,
                _ => LayerKind::Msa,
            })
            .collect()
    }

    pub fn patches(&self) -> usize {
        (IMAGE_SIZE / self.patch).pow(2)
    }

    /// Class token, two visual tokens, then the patch tokens.
    pub fn tokens(&self) -> usize {
        3 + self.patches()
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(&self) -> usize {
        let (d, t) = (self.dim, self.tokens());
        let hidden = self.mlp_ratio * d;
        let embed = 3 * self.patch * self.patch * d + d + t * d + 3 * d;
        let block = 2 * d + 4 * d * d + 2 * d + (d * hidden + hidden + hidden * d + d);
        let prompts = 2 * self.pool_size * self.prompt_len * d;
        let dh = d / self.heads;
        let cg = self.heads * 3 * dh * dh + (d * 2 * d + 2 * d + 2 * d * d + d) + 3 * d * d;
        let layers: usize = self
            .layer_plan()
            .iter()
            .map(|k| block + if k.uses_prompts() { prompts } else { 0 } + if k.uses_cg() { cg } else { 0 })
            .sum();
        embed + layers + 2 * d + 2 * (d + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    kind: LayerKind,
    ln1: (ParamId, ParamId),
    attn: AttentionParams,
    pool: Option<GuidePromptPool>,
    cg: Option<CgParams>,
    ln2: (ParamId, ParamId),
    mlp: [ParamId; 4],
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    cls: ParamId,
    visual: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    rf: (ParamId, ParamId),
    cmp: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: BackboneConfig,
    pub params: ParamStore,
    layout: Layout,
}

const EMBED_STD: f64 = 0.02;

fn layernorm_params(store: &mut ParamStore, prefix: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0)),
        store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
    )
}

pub fn build_model(cfg: &BackboneConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let d = cfg.dim;
    let patch_in = 3 * cfg.patch * cfg.patch;
    let patch_w = s.add("embed.patch_w", nn::linear_weight(&mut rng, patch_in, d));
    let patch_b = s.add("embed.patch_b", Tensor::zeros(&[d]));
    let pos = s.add("embed.pos", nn::normal(&mut rng, &[cfg.tokens(), d], EMBED_STD));
    let cls = s.add("embed.cls", nn::normal(&mut rng, &[1, d], EMBED_STD));
    let visual = s.add("embed.visual", nn::normal(&mut rng, &[2, d], EMBED_STD));
    let hidden = cfg.mlp_ratio * d;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for (i, kind) in cfg.layer_plan().into_iter().enumerate() {
        let p = format!("block{i}");
        let ln1 = layernorm_params(&mut s, &format!("{p}.ln1"), d);
        let attn = AttentionParams::new(&mut s, &format!("{p}.attn"), d, cfg.heads, &mut rng)?;
        let pool = kind
            .uses_prompts()
            .then(|| GuidePromptPool::new(&mut s, &format!("{p}.pool"), cfg.pool_size, cfg.prompt_len, d, &mut rng));
        let cg = kind
            .uses_cg()
            .then(|| CgParams::new(&mut s, &format!("{p}.cg"), d, cfg.heads, &mut rng));
        let ln2 = layernorm_params(&mut s, &format!("{p}.ln2"), d);
        let mlp = [
            s.add(format!("{p}.mlp.w1"), nn::linear_weight(&mut rng, d, hidden)),
            s.add(format!("{p}.mlp.b1"), Tensor::zeros(&[hidden])),
            s.add(format!("{p}.mlp.w2"), nn::linear_weight(&mut rng, hidden, d)),
            s.add(format!("{p}.mlp.b2"), Tensor::zeros(&[d])),
        ];
        blocks.push(Block {
            kind,
            ln1,
            attn,
            pool,
            cg,
            ln2,
            mlp,
        });
    }
    let ln_f = layernorm_params(&mut s, "final_ln", d);
    let rf = (
        s.add("head_rf.w", nn::linear_weight(&mut rng, d, 1)),
        s.add("head_rf.b", Tensor::zeros(&[1])),
    );
    let cmp = (
        s.add("head_cmp.w", nn::linear_weight(&mut rng, d, 1)),
        s.add("head_cmp.b", Tensor::zeros(&[1])),
    );
    Ok(Model {
        cfg: cfg.clone(),
        params: s,
        layout: Layout {
            patch_w,
            patch_b,
            pos,
            cls,
            visual,
            blocks,
            ln_f,
            rf,
            cmp,
        },
    })
}

/// `x − box3(x)` per channel of `[B, C, H, W]` images, scaled by `gain`.
pub fn high_pass(images: &Tensor, gain: f64) -> Tensor {
    let s = images.shape();
    let (h, w) = (s[2], s[3]);
    let src = images.data();
    let mut out = vec![0.0; src.len()];
    for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        sum += plane[yy * w + xx];
                    }
                }
                dst[y * w + x] = gain * (plane[y * w + x] - sum / 9.0);
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// Cuts `[B, 3, H, W]` images into `[B, L, 3·p·p]` patch rows (channel, row, column order).
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::Validation(format!("cannot cut {s:?} images into {patch}-pixel patches")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let (ph, pw) = (h / patch, w / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for c in 0..3 {
                    for dy in 0..patch {
                        let row = ((bi * 3 + c) * h + py * patch + dy) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b, ph * pw, 3 * patch * patch], out)?)
}

/// Per-layer prompt choice; `None` for layers without a pool.
pub type PromptPlan = Vec<Option<PromptChoice>>;

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Final class-token features `[B, D]`.
    pub h_rf: Var,
    /// Paired rows of `h_rf` after the reversal node, `[B', D]`; `None` when no row is paired.
    pub h_cmp: Option<Var>,
    pub logit_rf: Var,
    pub logit_cmp: Option<Var>,
    /// Attention variant executed by each block, in order.
    pub trace: Vec<LayerKind>,
}

/// Gradient treatment between the backbone and the compression head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reversal {
    Scale(f64),
    Disabled,
}

impl Model {
    pub fn is_head(&self, id: ParamId) -> bool {
        let l = &self.layout;
        [l.rf.0, l.rf.1, l.cmp.0, l.cmp.1].contains(&id)
    }

    pub fn cmp_head(&self) -> [ParamId; 2] {
        [self.layout.cmp.0, self.layout.cmp.1]
    }

    pub fn rf_head(&self) -> [ParamId; 2] {
        [self.layout.rf.0, self.layout.rf.1]
    }

    /// Pool sizes of the prompted layers (0 for unprompted ones).
    pub fn pool_sizes(&self) -> Vec<usize> {
        self.layout
            .blocks
            .iter()
            .map(|b| b.pool.as_ref().map_or(0, GuidePromptPool::len))
            .collect()
    }

    pub fn has_prompts(&self) -> bool {
        self.pool_sizes().iter().any(|&n| n > 0)
    }

    /// Independent per-layer choice for Random/FullAverage/HalfAverage.
    pub fn plan_prompts<R: Rng>(&self, mode: SelectMode, rng: &mut R) -> Result<PromptPlan> {
        self.pool_sizes()
            .into_iter()
            .map(|n| {
                if n == 0 {
                    Ok(None)
                } else {
                    Ok(Some(choose(n, mode, rng, None)?))
                }
            })
            .collect()
    }

    /// The same entry index in every prompted layer.
    pub fn uniform_plan(&self, entry: usize) -> PromptPlan {
        self.pool_sizes()
            .into_iter()
            .map(|n| (n > 0).then_some(PromptChoice::Entry(entry.min(n.saturating_sub(1)))))
            .collect()
    }

    /// Runs the backbone and both heads. `paired` lists the batch rows that feed
    /// the compression head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        images: &Tensor,
        paired: &[usize],
        plan: &PromptPlan,
        reversal: Reversal,
    ) -> Result<ForwardOutput> {
        let l = &self.layout;
        if plan.len() != l.blocks.len() {
            return Err(Error::Config(format!("prompt plan covers {} of {} layers", plan.len(), l.blocks.len())));
        }
        let batch = images.shape()[0];
        let patches = match self.cfg.stem {
            Stem::Pixels => patchify(images, self.cfg.patch)?,
            Stem::HighPass => patchify(&high_pass(images, HIGH_PASS_GAIN), self.cfg.patch)?,
        };
        let patches = tape.constant(patches);
        let tokens = tape.linear(patches, b[l.patch_w], Some(b[l.patch_b]))?;
        let prefix = tape.concat(&[b[l.cls], b[l.visual]], 0)?;
        let prefix = tape.broadcast_lead(prefix, batch);
        let x = tape.concat(&[prefix, tokens], 1)?;
        let pos = tape.broadcast_lead(b[l.pos], batch);
        let mut x = tape.add(x, pos)?;

        let mut trace = Vec::with_capacity(l.blocks.len());
        for (blk, choice) in l.blocks.iter().zip(plan) {
            let h = tape.layernorm(x, b[blk.ln1.0], b[blk.ln1.1])?;
            let av = blk.attn.vars(b);
            let qkv: Qkv = attention::project_qkv(tape, h, &av)?;
            let prompt: Option<Prompt> = match (&blk.pool, choice) {
                (Some(pool), Some(c)) => Some(pool.materialize(tape, b, c)?),
                (Some(_), None) => return Err(Error::Config("prompted layer without a prompt choice".into())),
                _ => None,
            };
            let attn_out = match (blk.kind, prompt) {
                (LayerKind::Msa, _) => attention::msa_with_weights(tape, qkv.q, qkv.k, qkv.v, &av)?.0,
                (LayerKind::PromptMsa, Some(p)) => attention::prompt_msa_qkv(tape, &qkv, &p, &av)?,
                (LayerKind::Rg, Some(p)) => attention::residual_guidance_qkv(tape, &qkv, &p, &av)?,
                (LayerKind::MsaCg, Some(p)) => {
                    let m = attention::msa_with_weights(tape, qkv.q, qkv.k, qkv.v, &av)?.0;
                    let cg = blk.cg.as_ref().expect("cg layer has cg params").vars(b);
                    attention::coordination_guidance_qkv(tape, m, &qkv, &p, &av, &cg)?
                }
                (LayerKind::RgCg, Some(p)) => {
                    let r = attention::residual_guidance_qkv(tape, &qkv, &p, &av)?;
                    let cg = blk.cg.as_ref().expect("cg layer has cg params").vars(b);
                    attention::coordination_guidance_qkv(tape, r, &qkv, &p, &av, &cg)?
                }
                (kind, None) => return Err(Error::Config(format!("{kind:?} layer needs a prompt"))),
            };
            trace.push(blk.kind);
            x = tape.add(x, attn_out)?;
            let h = tape.layernorm(x, b[blk.ln2.0], b[blk.ln2.1])?;
            let h = tape.linear(h, b[blk.mlp[0]], Some(b[blk.mlp[1]]))?;
            let h = tape.gelu(h);
            let h = tape.linear(h, b[blk.mlp[2]], Some(b[blk.mlp[3]]))?;
            x = tape.add(x, h)?;
        }
        let x = tape.layernorm(x, b[l.ln_f.0], b[l.ln_f.1])?;
        let cls = tape.slice(x, 1, 0, 1)?;
        let h_rf = tape.reshape(cls, &[batch, self.cfg.dim])?;
        let logit_rf = tape.linear(h_rf, b[l.rf.0], Some(b[l.rf.1]))?;

        let (h_cmp, logit_cmp) = if paired.is_empty() {
            (None, None)
        } else {
            let rows = tape.index_select(h_rf, 0, paired)?;
            let h = match reversal {
                Reversal::Scale(s) => tape.reverse_gradient(rows, s)?,
                Reversal::Disabled => rows,
            };
            let logit = tape.linear(h, b[l.cmp.0], Some(b[l.cmp.1]))?;
            (Some(h), Some(logit))
        };
        Ok(ForwardOutput {
            h_rf,
            h_cmp,
            logit_rf,
            logit_cmp,
            trace,
        })
    }

    /// Real/fake probabilities and class-token features with constant parameters.
    pub fn infer(&self, images: &Tensor, plan: &PromptPlan) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &b, images, &[], plan, Reversal::Disabled)?;
        let probs = tape
            .value(out.logit_rf)
            .data()
            .iter()
            .map(|&z| crate::tensor::sigmoid_value(z))
            .collect();
        Ok((probs, tape.value(out.h_rf).clone()))
    }

    /// Probabilities under full-average prompts.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<f64>> {
        let plan = self.plan_prompts(SelectMode::FullAverage, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(self.infer(images, &plan)?.0)
    }

    /// Overwrites parameters by name; every name and shape must match.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = t;
        }
        Ok(())
    }
}
