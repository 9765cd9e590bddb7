//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, UnaryKind, Var};

pub const STEP: f64 = 1e-6;
pub const INSTANCES: usize = 20;

/// Outcome of checking one op over many random instances.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    /// `op  max_rel_err  PASS|FAIL`
    pub fn line(&self) -> String {
        format!(
            "{:<24}  {:.3e}  {}",
            self.op,
            self.max_rel_err,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Compares tape and finite-difference gradients of `sum(f(inputs) ⊙ r)`
/// with respect to every input, for a fixed random projection `r`.
/// Returns the worst relative error over the inputs.
pub fn check<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let proj = Tensor::from_fn(&probe_shape, |_| rng.gen_range(-1.0..1.0));

    let eval = |ins: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let r = tape.constant(proj.clone());
        let weighted = tape.mul(out, r)?;
        let loss = tape.sum(weighted);
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let mut numeric = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let (tp, _, lp) = eval(&plus)?;
            let (tm, _, lm) = eval(&minus)?;
            numeric[i] = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&numeric, analytic.data()));
    }
    Ok(worst)
}

/// Runs `instances` random instances produced by `make` and reports the worst error.
pub fn run_case<M, F>(op: &str, tolerance: f64, instances: usize, seed: u64, mut make: M) -> Result<GradCheckReport>
where
    M: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, F),
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    for i in 0..instances {
        let (inputs, f) = make(&mut rng);
        max_rel_err = max_rel_err.max(check(&inputs, seed.wrapping_add(i as u64), f)?);
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_err,
        tolerance,
        instances,
    })
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        // Box-Muller keeps this independent of rand_distr's sampling path.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero in magnitude, random sign.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.3..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Boxed = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn dims(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Finite-difference suite over every differentiable tape op.
pub fn tensor_op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    const SMOOTH: f64 = 1e-5;
    const KINKED: f64 = 1e-4;
    let n = INSTANCES;
    let mut out = Vec::new();
    let mut s = seed;
    let mut next = || {
        s = s.wrapping_add(1000);
        s
    };

    out.push(run_case("matmul", SMOOTH, n, next(), |r| {
        let (m, k, p) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 4));
        let ins = vec![randn(r, &[m, k], 1.0), randn(r, &[k, p], 1.0)];
        (ins, Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1])) as Boxed)
    })?);
    out.push(run_case("matmul_batched_t", SMOOTH, n, next(), |r| {
        let (b, m, k, p) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
        let ta = r.gen_bool(0.5);
        let tb = r.gen_bool(0.5);
        let sa = if ta { [b, k, m] } else { [b, m, k] };
        let sb = if tb { [b, p, k] } else { [b, k, p] };
        let ins = vec![randn(r, &sa, 1.0), randn(r, &sb, 1.0)];
        (ins, Box::new(move |t: &mut Tape, v: &[Var]| t.matmul_t(v[0], v[1], ta, tb)) as Boxed)
    })?);
    out.push(run_case("add_bias", SMOOTH, n, next(), |r| {
        let (a, d) = (dims(r, 1, 4), dims(r, 1, 5));
        let ins = vec![randn(r, &[a, 2, d], 1.0), randn(r, &[d], 1.0)];
        (ins, Box::new(|t: &mut Tape, v: &[Var]| t.add_bias(v[0], v[1])) as Boxed)
    })?);
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        out.push(run_case(name, SMOOTH, n, next(), move |r| {
            let sh = [dims(r, 1, 4), dims(r, 1, 4)];
            let b = if which == 3 { away_from_zero(r, &sh) } else { randn(r, &sh, 1.0) };
            let ins = vec![randn(r, &sh, 1.0), b];
            (
                ins,
                Box::new(move |t: &mut Tape, v: &[Var]| match which {
                    0 => t.add(v[0], v[1]),
                    1 => t.sub(v[0], v[1]),
                    2 => t.mul(v[0], v[1]),
                    _ => t.div(v[0], v[1]),
                }) as Boxed,
            )
        })?);
    }
    out.push(run_case("scale_add_scalar", SMOOTH, n, next(), |r| {
        let c = r.gen_range(-3.0..3.0);
        let k = dims(r, 1, 6);
        let ins = vec![randn(r, &[k], 1.0)];
        (
            ins,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let s = t.scale(v[0], c);
                Ok(t.add_scalar(s, 0.5))
            }) as Boxed,
        )
    })?);
    let unaries: [(&str, UnaryKind, f64); 10] = [
        ("neg", UnaryKind::Neg, SMOOTH),
        ("exp", UnaryKind::Exp, SMOOTH),
        ("log", UnaryKind::Log, SMOOTH),
        ("sqrt", UnaryKind::Sqrt, SMOOTH),
        ("sigmoid", UnaryKind::Sigmoid, SMOOTH),
        ("tanh", UnaryKind::Tanh, SMOOTH),
        ("gelu", UnaryKind::Gelu, SMOOTH),
        ("square", UnaryKind::Square, SMOOTH),
        ("abs_pow", UnaryKind::AbsPow(2.5), KINKED),
        ("pow", UnaryKind::Pow(0.5), SMOOTH),
    ];
    for (name, kind, tol) in unaries {
        out.push(run_case(name, tol, n, next(), move |r| {
            let sh = [dims(r, 1, 3), dims(r, 1, 4)];
            let x = match kind {
                UnaryKind::Log | UnaryKind::Sqrt | UnaryKind::Pow(_) => uniform(r, &sh, 0.2, 3.0),
                UnaryKind::AbsPow(_) => away_from_zero(r, &sh),
                _ => randn(r, &sh, 1.5),
            };
            (vec![x], Box::new(move |t: &mut Tape, v: &[Var]| Ok(t.unary(v[0], kind))) as Boxed)
        })?);
    }
    out.push(run_case("softmax", SMOOTH, n, next(), |r| {
        let sh = [dims(r, 1, 3), dims(r, 2, 6), dims(r, 1, 3)];
        let axis = r.gen_range(0..3);
        (
            vec![randn(r, &sh, 2.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.softmax(v[0], axis)) as Boxed,
        )
    })?);
    out.push(run_case("layernorm", SMOOTH, n, next(), |r| {
        let d = dims(r, 2, 6);
        let rows = dims(r, 1, 4);
        let ins = vec![randn(r, &[rows, d], 1.0), randn(r, &[d], 1.0), randn(r, &[d], 1.0)];
        (ins, Box::new(|t: &mut Tape, v: &[Var]| t.layernorm(v[0], v[1], v[2])) as Boxed)
    })?);
    out.push(run_case("row_normalize", SMOOTH, n, next(), |r| {
        let sh = [dims(r, 1, 4), dims(r, 2, 6)];
        let ins = vec![randn(r, &sh, 1.0)];
        (ins, Box::new(|t: &mut Tape, v: &[Var]| Ok(t.row_normalize(v[0], 2.0))) as Boxed)
    })?);
    out.push(run_case("conv1d", SMOOTH, n, next(), |r| {
        let (b, l, c, co) = (dims(r, 1, 2), dims(r, 3, 7), dims(r, 1, 3), dims(r, 1, 3));
        let k = [1, 3, 5][r.gen_range(0..3)];
        let stride = dims(r, 1, 2);
        let padding = k / 2;
        let ins = vec![randn(r, &[b, l, c], 1.0), randn(r, &[k, c, co], 1.0)];
        (
            ins,
            Box::new(move |t: &mut Tape, v: &[Var]| t.conv1d(v[0], v[1], stride, padding)) as Boxed,
        )
    })?);
    out.push(run_case("adaptive_avg_pool", SMOOTH, n, next(), |r| {
        let (b, l, c) = (dims(r, 1, 2), dims(r, 2, 9), dims(r, 1, 3));
        let p = dims(r, 1, l);
        (
            vec![randn(r, &[b, l, c], 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.adaptive_avg_pool(v[0], p)) as Boxed,
        )
    })?);
    out.push(run_case("concat_slice", SMOOTH, n, next(), |r| {
        let (a, b, c) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
        let axis = r.gen_range(0..2);
        let (sa, sb) = if axis == 0 { ([a, c], [b, c]) } else { ([c, a], [c, b]) };
        let ins = vec![randn(r, &sa, 1.0), randn(r, &sb, 1.0)];
        (
            ins,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let cat = t.concat(&[v[0], v[1]], axis)?;
                let len = t.shape(cat)[axis];
                t.slice(cat, axis, 1.min(len - 1), len - 1.min(len - 1))
            }) as Boxed,
        )
    })?);
    out.push(run_case("permute_reshape", SMOOTH, n, next(), |r| {
        let sh = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 2)];
        (
            vec![randn(r, &sh, 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let p = t.permute(v[0], &[2, 0, 3, 1])?;
                let n: usize = sh.iter().product();
                t.reshape(p, &[n])
            }) as Boxed,
        )
    })?);
    out.push(run_case("broadcast_lead", SMOOTH, n, next(), |r| {
        let k = dims(r, 1, 4);
        let sh = [dims(r, 1, 3), dims(r, 1, 3)];
        (
            vec![randn(r, &sh, 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| Ok(t.broadcast_lead(v[0], k))) as Boxed,
        )
    })?);
    out.push(run_case("sum_mean_axis", SMOOTH, n, next(), |r| {
        let sh = [dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 3)];
        let axis = r.gen_range(0..3);
        (
            vec![randn(r, &sh, 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let s = t.sum_axis(v[0], axis)?;
                let m = t.mean_axis(v[0], axis)?;
                let sq = t.square(m);
                t.add(s, sq)
            }) as Boxed,
        )
    })?);
    out.push(run_case("index_select", SMOOTH, n, next(), |r| {
        let (a, b) = (dims(r, 2, 5), dims(r, 1, 3));
        let idx: Vec<usize> = (0..dims(r, 1, 6)).map(|_| r.gen_range(0..a)).collect();
        (
            vec![randn(r, &[a, b], 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.index_select(v[0], 0, &idx)) as Boxed,
        )
    })?);
    out.push(run_case("reverse_gradient", SMOOTH, n, next(), |r| {
        // two reversals with scales multiplying to one are an ordinary identity
        let scale = -r.gen_range(0.1..2.0);
        let k = dims(r, 1, 6);
        (
            vec![randn(r, &[k], 1.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let once = t.reverse_gradient(v[0], scale)?;
                let twice = t.reverse_gradient(once, 1.0 / scale)?;
                Ok(t.square(twice))
            }) as Boxed,
        )
    })?);
    out.push(run_case("bce_with_logits", SMOOTH, n, next(), |r| {
        let k = dims(r, 1, 8);
        let target = Tensor::from_fn(&[k], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
        (
            vec![randn(r, &[k], 3.0)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.bce_with_logits(v[0], &target)) as Boxed,
        )
    })?);
    out.push(run_case("pairwise_sq_dist", SMOOTH, n, next(), |r| {
        let sh = [dims(r, 2, 5), dims(r, 1, 4)];
        (
            vec![randn(r, &sh, 1.0)],
            Box::new(|t: &mut Tape, v: &[Var]| t.pairwise_sq_dist(v[0])) as Boxed,
        )
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_tensor_op_passes_finite_differences() {
        let reports = tensor_op_suite(7).unwrap();
        assert!(reports.len() >= 30);
        for r in &reports {
            assert!(r.instances >= 20);
            assert!(r.passed(), "{}", r.line());
        }
    }
}
