//! Aggregation loss pieces against scalar-loop reimplementations.

mod oracles;

use oracles::oda::{centers_error, dp_error, hsic_error, max_abs, M, mean_rows, naive_dp, naive_hsic, psi_row, rows, stats};
use plada_core::data::BatchPartition;
use plada_core::oda::{
    self, centers, d_p, hsic, l_dis, l_dis_with_stats, similarity_s, total_loss, BatchStats, DistanceConfig, LossConfig, TwinRows,
};
use plada_core::tensor::gradcheck::{check, randn};
use plada_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn centers_match_group_means() {
    let err = centers_error(11, 20);
    assert!(err <= 1e-12, "{err:e}");
}

#[test]
fn single_member_center_is_that_row() {
    let feats = Tensor::new(&[3, 2], vec![3.0, 4.0, -1.0, 0.5, 2.0, 2.0]).unwrap();
    let part = BatchPartition::from_labels(&[1, 0, 0], &[0, 0, 1]);
    let mut tape = Tape::new();
    let h = tape.constant(feats.clone());
    let set = centers(&mut tape, h, &part).unwrap();
    let c = set.get(1, 0).unwrap();
    assert!(max_abs(&psi_row(&[3.0, 4.0]), tape.value(c).data()) <= 1e-12);
}

#[test]
fn weighted_minkowski_matches_scalar_loop() {
    let err = dp_error(12, 10);
    assert!(err <= 1e-12, "{err:e}");
}

#[test]
fn batch_sigma_is_population_deviation() {
    let batch = randn(&mut ChaCha8Rng::seed_from_u64(18), &[7, 6], 1.0);
    let (_, sd) = stats(&rows(&batch));
    let st = BatchStats::of(&batch);
    assert!(st.sigma.data().iter().zip(&sd).all(|(x, y)| (x - y).abs() < 1e-14));
}

#[test]
fn hsic_matches_double_loop() {
    let err = hsic_error(16, 10);
    assert!(err <= 1e-10, "{err:e}");
}

#[test]
fn weighted_minkowski_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let st = BatchStats::of(&randn(&mut rng, &[7, 6], 1.0));
        let ins = vec![randn(&mut rng, &[6], 1.0), randn(&mut rng, &[6], 1.0)];
        let err = check(&ins, 5, |t, v| d_p(t, v[0], v[1], &DistanceConfig::default(), &st)).unwrap();
        assert!(err < 1e-5, "{err:e}");
    }
}

#[test]
fn symmetry_holds_only_with_unit_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = DistanceConfig { eps: 0.0, ..Default::default() };
    let a = randn(&mut rng, &[4], 1.0);
    let b = randn(&mut rng, &[4], 1.0);
    let stats_at = |c: &Tensor| BatchStats { mu: c.clone(), sigma: Tensor::full(&[4], 1.0) };
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let ab = d_p(&mut tape, av, bv, &cfg, &stats_at(&a)).unwrap();
    let ba = d_p(&mut tape, bv, av, &cfg, &stats_at(&b)).unwrap();
    assert!((tape.value(ab).item() - tape.value(ba).item()).abs() < 1e-12);
    // with shared batch statistics the weights follow the first argument
    let shared = BatchStats { mu: Tensor::zeros(&[4]), sigma: Tensor::full(&[4], 1.0) };
    let ab = d_p(&mut tape, av, bv, &cfg, &shared).unwrap();
    let ba = d_p(&mut tape, bv, av, &cfg, &shared).unwrap();
    assert!((tape.value(ab).item() - tape.value(ba).item()).abs() > 1e-6);
}

#[test]
fn similarity_is_monotone_in_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let st = BatchStats::of(&randn(&mut rng, &[9, 4], 1.0));
    let mut pts = Vec::new();
    for _ in 0..200 {
        let mut tape = Tape::new();
        let a = tape.constant(randn(&mut rng, &[4], 1.0));
        let scale = rng.gen_range(0.0..3.0);
        let b = tape.constant(randn(&mut rng, &[4], scale));
        let d = d_p(&mut tape, a, b, &DistanceConfig::default(), &st).unwrap();
        let s = similarity_s(&mut tape, a, b, &DistanceConfig::default(), &st).unwrap();
        pts.push((tape.value(d).item(), tape.value(s).item()));
    }
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    for w in pts.windows(2) {
        assert!(w[1].1 <= w[0].1);
        assert!(w[0].1 > 0.0 && w[0].1 <= 1.0);
    }
}

#[test]
fn hsic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let ins = vec![randn(&mut rng, &[6, 3], 1.0), randn(&mut rng, &[6, 3], 1.0)];
        let err = check(&ins, 9, |t, v| Ok(hsic(t, v[0], v[1])?.expect("n >= 2"))).unwrap();
        assert!(err < 1e-5, "{err:e}");
    }
}

fn fixed_batch() -> (Tensor, Vec<u8>, Vec<u8>, Vec<TwinRows>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let feats = randn(&mut rng, &[16, 6], 1.0);
    // rows 0..6 raw twins of rows 6..12; 12..16 unpaired raw
    let y: Vec<u8> = (0..16).map(|i| ((i % 6) % 2) as u8).collect();
    let yc: Vec<u8> = (0..16).map(|i| u8::from((6..12).contains(&i))).collect();
    let twins = (0..6).map(|i| TwinRows { raw: i, compressed: i + 6, y: y[i] }).collect();
    (feats, y, yc, twins)
}

#[test]
fn l_dis_matches_independent_recomputation() {
    let (feats, y, yc, twins) = fixed_batch();
    let cfg = DistanceConfig::default();
    let beta = 0.73;
    let mut tape = Tape::new();
    let h = tape.constant(feats.clone());
    let part = BatchPartition::from_labels(&y, &yc);
    let t = l_dis(&mut tape, h, &part, &twins, &cfg, beta).unwrap().unwrap();

    let psi: M = rows(&feats).iter().map(|r| psi_row(r)).collect();
    let (mu, sd) = stats(&psi);
    let group = |a: u8, c: u8| -> Vec<usize> { (0..16).filter(|&i| y[i] == a && yc[i] == c).collect() };
    let mut sim = 0.0;
    for c in 0..2 {
        let (r, f) = (group(0, c), group(1, c));
        let d = naive_dp(&mean_rows(&psi, &r), &mean_rows(&psi, &f), &mu, &sd, &cfg);
        sim += 1.0 / (1.0 + cfg.tau * d);
    }
    let mut hs = 0.0;
    for class in 0..2u8 {
        let pairs: Vec<&TwinRows> = twins.iter().filter(|p| p.y == class).collect();
        let x: M = pairs.iter().map(|p| psi[p.raw].clone()).collect();
        let z: M = pairs.iter().map(|p| psi[p.compressed].clone()).collect();
        hs += naive_hsic(&x, &z);
    }
    let expect = sim + beta * hs;
    assert!((tape.value(t.total).item() - expect).abs() <= 1e-9);
    assert!((tape.value(t.similarity.unwrap()).item() - sim).abs() <= 1e-9);
    assert!((tape.value(t.hsic.unwrap()).item() - hs).abs() <= 1e-9);
}

#[test]
fn l_dis_gradient_matches_finite_differences() {
    let (feats, y, yc, twins) = fixed_batch();
    let part = BatchPartition::from_labels(&y, &yc);
    // batch statistics are constants on the tape, so hold them fixed for the finite differences
    let frozen = {
        let mut t = Tape::new();
        let h = t.constant(feats.clone());
        let p = oda::psi(&mut t, h);
        BatchStats::of(t.value(p))
    };
    let err = check(&[feats], 3, |t, v| {
        let cfg = DistanceConfig::default();
        Ok(l_dis_with_stats(t, v[0], &part, &twins, &cfg, 0.5, Some(&frozen))?.unwrap().total)
    })
    .unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn separating_centers_lowers_similarity_term() {
    let (feats, y, yc, _) = fixed_batch();
    let part = BatchPartition::from_labels(&y, &yc);
    let value = |f: &Tensor| {
        let mut tape = Tape::new();
        let h = tape.constant(f.clone());
        let t = l_dis(&mut tape, h, &part, &[], &DistanceConfig::default(), 0.5).unwrap().unwrap();
        tape.value(t.total).item()
    };
    // push real rows along +e0 and fake rows along -e0
    let mut prev = value(&feats);
    for k in 1..6 {
        let shifted = Tensor::from_fn(&[16, 6], |i| {
            let (r, c) = (i / 6, i % 6);
            let sign = if y[r] == 0 { 1.0 } else { -1.0 };
            feats.data()[i] + if c == 0 { sign * k as f64 } else { 0.0 }
        });
        let v = value(&shifted);
        assert!(v < prev, "shift {k}: {v} !< {prev}");
        prev = v;
    }
}

#[test]
fn descent_on_similarity_separates_two_points() {
    let cfg = DistanceConfig { eps: 0.0, ..Default::default() };
    let mut a = Tensor::new(&[2], vec![0.1, -0.2]).unwrap();
    let mut b = Tensor::new(&[2], vec![0.3, 0.1]).unwrap();
    let euclid = |a: &Tensor, b: &Tensor| a.zip_map(b, |x, y| x - y).unwrap().sq_norm().sqrt();
    let mut sep = euclid(&a, &b);
    for step in 0..50 {
        let mut tape = Tape::new();
        let (av, bv) = (tape.param(a.clone()), tape.param(b.clone()));
        // μ pinned at the current a so every weight is exactly 1
        let st = BatchStats { mu: a.clone(), sigma: Tensor::full(&[2], 1.0) };
        let s = similarity_s(&mut tape, av, bv, &cfg, &st).unwrap();
        let g = tape.backward(s).unwrap();
        a = a.zip_map(&g.wrt(av), |x, d| x - 0.1 * d).unwrap();
        b = b.zip_map(&g.wrt(bv), |x, d| x - 0.1 * d).unwrap();
        let next = euclid(&a, &b);
        assert!(next > sep, "step {step}: {next} <= {sep}");
        sep = next;
    }
}

#[test]
fn total_loss_gradient_is_sum_of_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let w0 = randn(&mut rng, &[4, 3], 1.0);
    let x = randn(&mut rng, &[5, 4], 1.0);
    let cfg = LossConfig::default();
    let build = |tape: &mut Tape, parts: [bool; 4]| {
        let w = tape.param(w0.clone());
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, w).unwrap();
        let sq = tape.square(h);
        let l_rf = tape.mean(sq);
        let th = tape.tanh(h);
        let l_cmp = tape.sum(th);
        let ex = tape.exp(h);
        let l_dis = tape.mean(ex);
        let zero = tape.constant(Tensor::scalar(0.0));
        let c = LossConfig {
            alpha: if parts[2] { cfg.alpha } else { 0.0 },
            weight_decay: if parts[3] { cfg.weight_decay } else { 0.0 },
            ..cfg
        };
        let rf = if parts[0] { l_rf } else { zero };
        let total = total_loss(tape, rf, parts[1].then_some(l_cmp), Some(l_dis), &c, &[w]).unwrap();
        (w, total)
    };
    let mut tape = Tape::new();
    let (w, all) = build(&mut tape, [true; 4]);
    let full = tape.backward(all).unwrap().wrt(w);
    let mut summed = Tensor::zeros(&[4, 3]);
    for k in 0..4 {
        let mut parts = [false; 4];
        parts[k] = true;
        let mut t = Tape::new();
        let (w, l) = build(&mut t, parts);
        summed = summed.zip_map(&t.backward(l).unwrap().wrt(w), |a, b| a + b).unwrap();
    }
    assert!(full.max_abs_diff(&summed) < 1e-12);

    let mut tape = Tape::new();
    let w = tape.param(w0.clone());
    let l = total_loss(&mut tape, w, None, None, &cfg, &[w]);
    assert!(l.is_err(), "non-scalar task loss is rejected by the add");
    let _ = (w, oda::beta(cfg.gamma, 0.0));
}
