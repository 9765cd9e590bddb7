//! Four-center aggregation loss over (real/fake) × (raw/compressed) states.

use serde::{Deserialize, Serialize};

use crate::data::BatchPartition;
use crate::tensor::{Tape, Tensor, TensorError, UnaryKind, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// Distance family used between centers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Gaussian-weighted Minkowski distance of order `p`.
    #[default]
    Minkowski,
    /// `1 - cos(a, b)`; ignores `p` and the batch statistics.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    #[serde(default)]
    pub metric: Metric,
    pub p: f64,
    pub tau: f64,
    pub eps: f64,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig {
            metric: Metric::Minkowski,
            p: 2.0,
            tau: 1.0,
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub distance: DistanceConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.004,
            gamma: 1.0,
            weight_decay: 1e-4,
            distance: DistanceConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.distance;
        let bad = |m: String| Err(TensorError::Config { op: "loss_config", msg: m });
        if !(d.p >= 1.0) || !(d.tau > 0.0) || !(d.eps >= 0.0) {
            return bad(format!("need p >= 1, tau > 0, eps >= 0; got {d:?}"));
        }
        if !(self.alpha >= 0.0) || !(self.weight_decay >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("need alpha >= 0, weight_decay >= 0 and finite gamma; got {self:?}"));
        }
        Ok(())
    }
}

/// Row L2 normalisation to norm √D; zero rows stay zero.
pub fn psi(tape: &mut Tape, h: Var) -> Var {
    let d = *tape.shape(h).last().unwrap_or(&1) as f64;
    tape.row_normalize(h, d.sqrt())
}

/// Per-dimension mean and (population) standard deviation of `[B, D]` rows, as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl BatchStats {
    pub fn of(x: &Tensor) -> BatchStats {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut mu = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mu.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mu) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        BatchStats {
            mu: Tensor::new(&[d], mu).expect("shape"),
            sigma: Tensor::new(&[d], var.into_iter().map(f64::sqrt).collect()).expect("shape"),
        }
    }
}

/// Index `[y][y_c]`.
#[derive(Clone, Debug)]
pub struct CenterSet {
    pub centers: [[Option<Var>; 2]; 2],
    pub counts: [[usize; 2]; 2],
}

impl CenterSet {
    pub fn get(&self, y: u8, y_c: u8) -> Option<Var> {
        self.centers[y as usize][y_c as usize]
    }
}

/// Means of already Ψ-transformed rows per state.
pub fn centers_of(tape: &mut Tape, psi_feats: Var, partition: &BatchPartition) -> Result<CenterSet> {
    let mut set = CenterSet {
        centers: [[None; 2]; 2],
        counts: [[0; 2]; 2],
    };
    for (y, yc, idx) in partition.states() {
        set.counts[y as usize][yc as usize] = idx.len();
        if !idx.is_empty() {
            let rows = tape.index_select(psi_feats, 0, idx)?;
            set.centers[y as usize][yc as usize] = Some(tape.mean_axis(rows, 0)?);
        }
    }
    Ok(set)
}

/// Aggregation centers of raw features `[B, D]`: per-state means of Ψ(features).
pub fn centers(tape: &mut Tape, features: Var, partition: &BatchPartition) -> Result<CenterSet> {
    let p = psi(tape, features);
    centers_of(tape, p, partition)
}

/// Gaussian-weighted Minkowski distance; the weights λ come from `a`, so
/// `d_p(a, b) != d_p(b, a)` in general.
pub fn d_p(tape: &mut Tape, a: Var, b: Var, cfg: &DistanceConfig, stats: &BatchStats) -> Result<Var> {
    let inv_scale = stats.sigma.map(|s| 1.0 / (s + cfg.eps));
    let inv_scale = tape.constant(inv_scale);
    let diff = tape.sub(a, b)?;
    let z = tape.mul(diff, inv_scale)?;
    let zp = tape.unary(z, UnaryKind::AbsPow(cfg.p));
    // λ = exp(-(a - μ)² / (2(σ + ε)²))
    let mu = tape.constant(stats.mu.clone());
    let inv_two_var = tape.constant(stats.sigma.map(|s| 1.0 / (2.0 * (s + cfg.eps).powi(2))));
    let dev = tape.sub(a, mu)?;
    let dev2 = tape.square(dev);
    let e = tape.mul(dev2, inv_two_var)?;
    let e = tape.neg(e);
    let lambda = tape.exp(e);
    let weighted = tape.mul(lambda, zp)?;
    let s = tape.sum(weighted);
    Ok(tape.unary(s, UnaryKind::Pow(1.0 / cfg.p)))
}

/// `1 - a·b / (|a|·|b|)`, with a small floor under each norm.
pub fn cosine_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let norm = |tape: &mut Tape, x: Var| {
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let s = tape.add_scalar(s, 1e-12);
        tape.sqrt(s)
    };
    let ab = tape.mul(a, b)?;
    let dot = tape.sum(ab);
    let na = norm(tape, a);
    let nb = norm(tape, b);
    let den = tape.mul(na, nb)?;
    let cos = tape.div(dot, den)?;
    let neg = tape.neg(cos);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `1 / (1 + τ·d(ci, cj))` under the configured metric.
pub fn similarity_s(tape: &mut Tape, ci: Var, cj: Var, cfg: &DistanceConfig, stats: &BatchStats) -> Result<Var> {
    let d = match cfg.metric {
        Metric::Minkowski => d_p(tape, ci, cj, cfg, stats)?,
        Metric::Cosine => cosine_distance(tape, ci, cj)?,
    };
    let d = tape.scale(d, cfg.tau);
    let d = tape.add_scalar(d, 1.0);
    Ok(tape.unary(d, UnaryKind::Pow(-1.0)))
}

/// Flat indices of the off-diagonal squared distances that define the median
/// (one entry for an odd count, two for an even count). Empty when the median is zero.
pub fn median_bandwidth_entries(sq: &Tensor) -> Vec<usize> {
    let n = sq.shape()[0];
    let mut v: Vec<(f64, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| i * n + j))
        .map(|k| (sq.data()[k], k))
        .collect();
    if v.is_empty() {
        return Vec::new();
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let m = v.len();
    let picked = if m % 2 == 1 { vec![v[m / 2]] } else { vec![v[m / 2 - 1], v[m / 2]] };
    if picked.iter().map(|p| p.0).sum::<f64>() > 0.0 {
        picked.into_iter().map(|p| p.1).collect()
    } else {
        Vec::new()
    }
}

/// Median of the off-diagonal squared distances; 1 when it is zero.
pub fn median_bandwidth(sq: &Tensor) -> f64 {
    let idx = median_bandwidth_entries(sq);
    if idx.is_empty() {
        return 1.0;
    }
    idx.iter().map(|&k| sq.data()[k]).sum::<f64>() / idx.len() as f64
}

/// Gaussian gram matrix whose median bandwidth stays on the tape, so the
/// gradient also flows through the selected distance entries.
fn gaussian_gram(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let sq = tape.pairwise_sq_dist(x)?;
    let idx = median_bandwidth_entries(tape.value(sq));
    if idx.is_empty() {
        let k = tape.scale(sq, -0.5);
        return Ok(tape.exp(k));
    }
    let flat = tape.reshape(sq, &[n * n])?;
    let picked = tape.index_select(flat, 0, &idx)?;
    let bw = tape.mean_axis(picked, 0)?;
    let inv = tape.unary(bw, UnaryKind::Pow(-1.0));
    let inv = tape.reshape(inv, &[1])?;
    let inv = tape.broadcast_lead(inv, n * n);
    let inv = tape.reshape(inv, &[n, n])?;
    let k = tape.mul(sq, inv)?;
    let k = tape.scale(k, -0.5);
    Ok(tape.exp(k))
}

/// Biased HSIC `trace(K H L H) / (n-1)²` with median-bandwidth Gaussian kernels.
/// `None` when fewer than two rows are available.
pub fn hsic(tape: &mut Tape, x: Var, y: Var) -> Result<Option<Var>> {
    let n = tape.shape(x)[0];
    if tape.shape(y)[0] != n {
        return Err(TensorError::Shape {
            op: "hsic",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(y).to_vec(),
        });
    }
    if n < 2 {
        return Ok(None);
    }
    let k = gaussian_gram(tape, x)?;
    let l = gaussian_gram(tape, y)?;
    let h = Tensor::from_fn(&[n, n], |i| (if i / n == i % n { 1.0 } else { 0.0 }) - 1.0 / n as f64);
    let h = tape.constant(h);
    let kh = tape.matmul(k, h)?;
    let hkh = tape.matmul(h, kh)?;
    let prod = tape.mul(hkh, l)?;
    let s = tape.sum(prod);
    Ok(Some(tape.scale(s, 1.0 / ((n - 1) * (n - 1)) as f64)))
}

/// `β = sigmoid(γ·g_prev)`, kept strictly inside (0, 1) where f64 would round to an end.
pub fn beta(gamma: f64, prev_grad_norm: f64) -> f64 {
    crate::tensor::sigmoid_value(gamma * prev_grad_norm).clamp(BETA_FLOOR, 1.0 - BETA_FLOOR)
}

pub const BETA_FLOOR: f64 = 1e-12;

/// A raw/compressed twin pair inside the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TwinRows {
    pub raw: usize,
    pub compressed: usize,
    pub y: u8,
}

#[derive(Clone, Debug)]
pub struct DisTerms {
    pub total: Var,
    pub similarity: Option<Var>,
    pub hsic: Option<Var>,
    pub beta: f64,
}

/// Similarity between real and fake centers per compression state, plus
/// β-weighted HSIC between raw and compressed twin features per class.
/// `None` when neither part has any term.
pub fn l_dis(
    tape: &mut Tape,
    features: Var,
    partition: &BatchPartition,
    twins: &[TwinRows],
    cfg: &DistanceConfig,
    beta: f64,
) -> Result<Option<DisTerms>> {
    l_dis_with_stats(tape, features, partition, twins, cfg, beta, None)
}

/// [`l_dis`] with the Ψ-feature statistics supplied instead of measured on the batch.
pub fn l_dis_with_stats(
    tape: &mut Tape,
    features: Var,
    partition: &BatchPartition,
    twins: &[TwinRows],
    cfg: &DistanceConfig,
    beta: f64,
    stats: Option<&BatchStats>,
) -> Result<Option<DisTerms>> {
    let p = psi(tape, features);
    let stats = stats.cloned().unwrap_or_else(|| BatchStats::of(tape.value(p)));
    let set = centers_of(tape, p, partition)?;
    let mut sim_terms = Vec::new();
    for yc in 0..2u8 {
        if let (Some(real), Some(fake)) = (set.get(0, yc), set.get(1, yc)) {
            sim_terms.push(similarity_s(tape, real, fake, cfg, &stats)?);
        }
    }
    let mut hsic_terms = Vec::new();
    for y in 0..2u8 {
        let (raw, cmp): (Vec<usize>, Vec<usize>) =
            twins.iter().filter(|t| t.y == y).map(|t| (t.raw, t.compressed)).unzip();
        if raw.len() < 2 {
            continue;
        }
        let x = tape.index_select(p, 0, &raw)?;
        let yv = tape.index_select(p, 0, &cmp)?;
        if let Some(h) = hsic(tape, x, yv)? {
            hsic_terms.push(h);
        }
    }
    let sum = |tape: &mut Tape, v: &[Var]| -> Result<Option<Var>> {
        let mut it = v.iter();
        let Some(&first) = it.next() else { return Ok(None) };
        let mut acc = first;
        for &t in it {
            acc = tape.add(acc, t)?;
        }
        Ok(Some(acc))
    };
    let similarity = sum(tape, &sim_terms)?;
    let hsic_sum = sum(tape, &hsic_terms)?;
    let total = match (similarity, hsic_sum) {
        (None, None) => return Ok(None),
        (Some(s), None) => s,
        (None, Some(h)) => tape.scale(h, beta),
        (Some(s), Some(h)) => {
            let bh = tape.scale(h, beta);
            tape.add(s, bh)?
        }
    };
    Ok(Some(DisTerms {
        total,
        similarity,
        hsic: hsic_sum,
        beta,
    }))
}

/// `L_rf + L_cmp + α·L_dis + ½·wd·Σθ²`; absent terms contribute zero.
pub fn total_loss(
    tape: &mut Tape,
    l_rf: Var,
    l_cmp: Option<Var>,
    l_dis: Option<Var>,
    cfg: &LossConfig,
    params: &[Var],
) -> Result<Var> {
    let mut total = l_rf;
    if let Some(c) = l_cmp {
        total = tape.add(total, c)?;
    }
    if let (Some(d), true) = (l_dis, cfg.alpha > 0.0) {
        let d = tape.scale(d, cfg.alpha);
        total = tape.add(total, d)?;
    }
    if cfg.weight_decay > 0.0 && !params.is_empty() {
        let mut reg: Option<Var> = None;
        for &p in params {
            let sq = tape.square(p);
            let s = tape.sum(sq);
            reg = Some(match reg {
                Some(r) => tape.add(r, s)?,
                None => s,
            });
        }
        let reg = tape.scale(reg.expect("non-empty"), 0.5 * cfg.weight_decay);
        total = tape.add(total, reg)?;
    }
    Ok(total)
}
