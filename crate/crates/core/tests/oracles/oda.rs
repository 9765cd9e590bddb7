//! Scalar-loop reimplementations of the aggregation loss pieces.

use plada_core::data::BatchPartition;
use plada_core::oda::{centers, d_p, hsic, BatchStats, DistanceConfig};
use plada_core::tensor::gradcheck::randn;
use plada_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> M {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn psi_row(r: &[f64]) -> Vec<f64> {
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; r.len()];
    }
    let s = (r.len() as f64).sqrt() / n;
    r.iter().map(|v| v * s).collect()
}

pub fn mean_rows(m: &M, idx: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; m[0].len()];
    for &i in idx {
        for (o, v) in out.iter_mut().zip(&m[i]) {
            *o += v;
        }
    }
    out.iter().map(|v| v / idx.len() as f64).collect()
}

pub fn stats(m: &M) -> (Vec<f64>, Vec<f64>) {
    let all: Vec<usize> = (0..m.len()).collect();
    let mu = mean_rows(m, &all);
    let sd = (0..mu.len())
        .map(|c| (m.iter().map(|r| (r[c] - mu[c]).powi(2)).sum::<f64>() / m.len() as f64).sqrt())
        .collect();
    (mu, sd)
}

pub fn naive_dp(a: &[f64], b: &[f64], mu: &[f64], sd: &[f64], cfg: &DistanceConfig) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let se = sd[i] + cfg.eps;
        let lambda = (-(a[i] - mu[i]).powi(2) / (2.0 * se * se)).exp();
        s += lambda * ((a[i] - b[i]) / se).abs().powf(cfg.p);
    }
    s.powf(1.0 / cfg.p)
}

pub fn median_sq(m: &M) -> f64 {
    let mut d = Vec::new();
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            d.push(m[i].iter().zip(&m[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>());
        }
    }
    d.sort_by(f64::total_cmp);
    let k = d.len();
    let med = if k % 2 == 1 { d[k / 2] } else { 0.5 * (d[k / 2 - 1] + d[k / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

pub fn naive_hsic(x: &M, y: &M) -> f64 {
    let n = x.len();
    let gram = |m: &M| -> M {
        let bw = median_sq(m);
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| (a - b).powi(2)).sum();
                        (-d / (2.0 * bw)).exp()
                    })
                    .collect()
            })
            .collect()
    };
    let (k, l) = (gram(x), gram(y));
    let center = |g: &M| -> M {
        let row: Vec<f64> = g.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let col: Vec<f64> = (0..n).map(|j| g.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        (0..n).map(|i| (0..n).map(|j| g[i][j] - row[i] - col[j] + all).collect()).collect()
    };
    let kc = center(&k);
    let mut tr = 0.0;
    for i in 0..n {
        for j in 0..n {
            tr += kc[i][j] * l[j][i];
        }
    }
    tr / ((n - 1) * (n - 1)) as f64
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_partition(rng: &mut ChaCha8Rng, n: usize) -> (Vec<u8>, Vec<u8>) {
    let y = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
    let yc = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
    (y, yc)
}

/// Worst gap between tape centers and group means of Ψ rows over random partitions.
pub fn centers_error(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.gen_range(1..14);
        let feats = randn(&mut rng, &[n, 5], 1.5);
        let (y, yc) = random_partition(&mut rng, n);
        let part = BatchPartition::from_labels(&y, &yc);
        let mut tape = Tape::new();
        let h = tape.constant(feats.clone());
        let set = centers(&mut tape, h, &part).unwrap();
        let psi: M = rows(&feats).iter().map(|r| psi_row(r)).collect();
        assert_eq!(set.counts.iter().flatten().sum::<usize>(), n);
        for (a, c, idx) in part.states() {
            match set.get(a, c) {
                None => assert!(idx.is_empty()),
                Some(v) => worst = worst.max(max_abs(&mean_rows(&psi, idx), tape.value(v).data())),
            }
        }
    }
    worst
}

/// Worst gap between tape d_p and the scalar loop for p in {1, 2, 3}.
pub fn dp_error(seed: u64, per_p: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for p in [1.0, 2.0, 3.0] {
        let cfg = DistanceConfig { p, ..Default::default() };
        for _ in 0..per_p {
            let batch = randn(&mut rng, &[7, 6], 1.0);
            let st = BatchStats::of(&batch);
            let (a, b) = (randn(&mut rng, &[6], 1.0), randn(&mut rng, &[6], 1.0));
            let mut tape = Tape::new();
            let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let d = d_p(&mut tape, av, bv, &cfg, &st).unwrap();
            let (mu, sd) = stats(&rows(&batch));
            worst = worst.max((tape.value(d).item() - naive_dp(a.data(), b.data(), &mu, &sd, &cfg)).abs());
        }
    }
    worst
}

/// Worst gap between tape HSIC and the double loop on dependent 8×3 pairs.
pub fn hsic_error(seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = randn(&mut rng, &[8, 3], 1.0);
        let y = randn(&mut rng, &[8, 3], 1.0).zip_map(&x, |a, b| a + 0.7 * b).unwrap();
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let hv = hsic(&mut tape, xv, yv).unwrap().unwrap();
        let h = tape.value(hv).item();
        assert!(h >= -1e-10);
        worst = worst.max((h - naive_hsic(&rows(&x), &rows(&y))).abs());
    }
    worst
}
