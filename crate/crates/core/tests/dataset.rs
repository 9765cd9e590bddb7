use std::collections::{HashMap, HashSet};

use plada_core::data::{
    batches, build_dataset, epoch_order, load_dataset, make_test_set, save_dataset, DatasetManifest, Protocol,
    QpRegime, TestSpec,
};

fn manifest(n: usize, paired: f64, regime: QpRegime) -> DatasetManifest {
    DatasetManifest::new(11, n, paired, regime)
}

#[test]
fn twenty_percent_pairs() {
    let ds = build_dataset(&manifest(1000, 0.2, QpRegime::Fixed(50))).unwrap();
    assert_eq!(ds.len(), 1200);
    assert_eq!(ds.samples.iter().filter(|s| s.y_c == 0).count(), 1000);
    let cmp: Vec<_> = ds.samples.iter().filter(|s| s.y_c == 1).collect();
    assert_eq!(cmp.len(), 200);
    assert!(cmp.iter().all(|s| s.qp() == Some(50)));
    assert_eq!(ds.samples.iter().filter(|s| s.pair_id.is_some()).count(), 400);
}

#[test]
fn sample_invariants_and_twin_hashes() {
    let ds = build_dataset(&manifest(200, 0.3, QpRegime::Uniform(30, 100))).unwrap();
    let raw_by_pair: HashMap<usize, String> = ds
        .samples
        .iter()
        .filter(|s| s.y_c == 0 && s.pair_id.is_some())
        .map(|s| (s.pair_id.unwrap(), s.image.digest()))
        .collect();
    for s in &ds.samples {
        assert_eq!(s.y_c == 1, s.qp().is_some());
        if s.y_c == 1 {
            let rec = s.record.as_ref().unwrap();
            assert_eq!(raw_by_pair[&s.pair_id.unwrap()], rec.source_hash);
            assert!((30..=100).contains(&rec.qp));
        }
    }
    let fakes = ds.samples.iter().filter(|s| s.y_c == 0 && s.y == 1).count();
    assert!((fakes as i64 - 100).abs() <= 1);
}

#[test]
fn unpaired_dataset_is_all_raw() {
    let ds = build_dataset(&manifest(50, 0.0, QpRegime::Fixed(50))).unwrap();
    assert_eq!(ds.len(), 50);
    assert!(ds.samples.iter().all(|s| s.pair_id.is_none() && s.y_c == 0));
}

#[test]
fn too_many_pairs_is_rejected() {
    let err = build_dataset(&manifest(50, 0.6, QpRegime::Fixed(50))).unwrap_err();
    assert!(err.to_string().contains("no more than 50%"));
}

#[test]
fn construction_is_a_pure_function_of_the_manifest() {
    let m = manifest(60, 0.2, QpRegime::Uniform(30, 100));
    assert_eq!(build_dataset(&m).unwrap(), build_dataset(&m).unwrap());
    let other = DatasetManifest { seed: 12, ..m };
    assert_ne!(build_dataset(&other).unwrap().samples, build_dataset(&m).unwrap().samples);
}

#[test]
fn test_protocols() {
    let m = manifest(100, 0.2, QpRegime::Fixed(50));
    let spec = TestSpec::after(&m, 40);
    let aware = make_test_set(&m, spec, Protocol::QualityAware(50)).unwrap();
    assert!(aware.iter().all(|s| s.qp() == Some(50) && s.pair_id.is_none()));
    assert_eq!(aware.iter().filter(|s| s.y == 1).count(), 20);
    let raw = make_test_set(&m, spec, Protocol::Raw).unwrap();
    assert!(raw.iter().all(|s| s.y_c == 0));

    let agnostic = make_test_set(&m, TestSpec::after(&m, 2000), Protocol::QualityAgnostic(30, 100)).unwrap();
    let distinct: HashSet<u8> = agnostic.iter().map(|s| s.qp().unwrap()).collect();
    assert!(distinct.len() >= 50, "{}", distinct.len());
    assert!(distinct.iter().all(|q| (30..=100).contains(q)));
}

#[test]
fn overlapping_test_seeds_are_rejected() {
    let m = manifest(100, 0.2, QpRegime::Fixed(50));
    let spec = TestSpec { seed: m.seed + 50, n: 10 };
    assert!(make_test_set(&m, spec, Protocol::Raw).is_err());
}

#[test]
fn protocol_and_regime_strings_roundtrip() {
    for s in ["aware:50", "agnostic:30-100", "raw"] {
        assert_eq!(s.parse::<Protocol>().unwrap().to_string(), s);
    }
    for s in ["fixed:50", "uniform:30-100"] {
        assert_eq!(s.parse::<QpRegime>().unwrap().to_string(), s);
    }
    assert!("fixed:0".parse::<QpRegime>().is_err());
    assert!("uniform:90-30".parse::<QpRegime>().is_err());
    assert!("lossy".parse::<Protocol>().is_err());
}

#[test]
fn batching() {
    let ds = build_dataset(&manifest(1000, 0.2, QpRegime::Fixed(50))).unwrap();
    let b = batches(&ds.samples, 32, 3, 0).unwrap();
    assert_eq!(b.len(), 37);
    for batch in &b {
        assert_eq!(batch.images.shape(), &[32, 3, 64, 64]);
        let mut all: Vec<usize> = batch.partition.states().iter().flat_map(|(_, _, s)| s.to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
        for &(r, c) in &batch.twins {
            assert_eq!(batch.y_c[r], 0);
            assert_eq!(batch.y_c[c], 1);
            assert!(batch.paired_mask[r] && batch.paired_mask[c]);
        }
    }
    let twins: usize = b.iter().map(|x| x.twins.len()).sum();
    assert!(twins >= 180, "{twins}");

    assert_eq!(epoch_order(&ds.samples, 3, 1), epoch_order(&ds.samples, 3, 1));
    assert_ne!(epoch_order(&ds.samples, 3, 1), epoch_order(&ds.samples, 3, 2));
    assert!(batches(&ds.samples, 3, 0, 0).is_err());
}

#[test]
fn dataset_directory_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_dataset(&manifest(30, 0.2, QpRegime::Fixed(50))).unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let header = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    assert!(header.starts_with("file,y,y_c,qp,pair_id\n"));
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}
