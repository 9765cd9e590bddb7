//! Inference over a sample set and the Acc/AP summary.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{DataSource, TrainConfig};
use super::metrics::{accuracy, average_precision};
use crate::attention::SelectMode;
use crate::data::{build_dataset, eval_batches, load_dataset, make_test_set, DatasetManifest, Protocol, Sample, TestSpec};
use crate::error::Result;
use crate::model::{Model, PromptPlan};

pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub id: usize,
    pub y: u8,
    pub y_c: u8,
    pub qp: Option<u8>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub accuracy: f64,
    pub ap: f64,
    pub predictions: Vec<Prediction>,
}

/// Prompt plan for one inference batch. Random mode draws a fresh plan per call.
pub fn inference_plan(model: &Model, mode: SelectMode, rng: &mut ChaCha8Rng) -> Result<PromptPlan> {
    if !model.has_prompts() {
        return Ok(vec![None; model.cfg.depth]);
    }
    model.plan_prompts(mode, rng)
}

/// Fake probabilities and class-token features, in sample order.
pub fn infer_samples(model: &Model, samples: &[Sample], mode: SelectMode, seed: u64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::with_capacity(samples.len());
    let mut feats = Vec::with_capacity(samples.len());
    for batch in eval_batches(samples, EVAL_BATCH) {
        let batch = batch?;
        let plan = inference_plan(model, mode, &mut rng)?;
        let (p, h) = model.infer(&batch.images, &plan)?;
        probs.extend(p);
        let d = h.shape()[1];
        feats.extend(h.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok((probs, feats))
}

pub fn evaluate(model: &Model, samples: &[Sample], protocol: &str, mode: SelectMode, seed: u64) -> Result<EvalReport> {
    let (scores, _) = infer_samples(model, samples, mode, seed)?;
    let y: Vec<u8> = samples.iter().map(|s| s.y).collect();
    Ok(EvalReport {
        protocol: protocol.to_string(),
        accuracy: accuracy(&scores, &y),
        ap: average_precision(&scores, &y),
        predictions: samples
            .iter()
            .zip(&scores)
            .enumerate()
            .map(|(id, (s, &score))| Prediction { id, y: s.y, y_c: s.y_c, qp: s.qp(), score })
            .collect(),
    })
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &report.predictions {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Training samples named by the config, with their manifest.
pub fn load_training_data(cfg: &TrainConfig) -> Result<(DatasetManifest, Vec<Sample>)> {
    let ds = match &cfg.data {
        DataSource::Dir(dir) => load_dataset(dir)?,
        DataSource::Generate(m) => build_dataset(m)?,
    };
    Ok((ds.manifest, ds.samples))
}

/// Held-out test images for `train`, transformed by `protocol`.
pub fn test_samples(train: &DatasetManifest, n: usize, protocol: Protocol) -> Result<Vec<Sample>> {
    make_test_set(train, TestSpec::after(train, n), protocol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QpRegime;
    use crate::model::{build_model, BackboneConfig};

    #[test]
    fn reports_cover_every_sample_and_repeat() {
        let m = DatasetManifest::new(0, 40, 0.0, QpRegime::Fixed(50));
        let test = test_samples(&m, 20, Protocol::QualityAware(50)).unwrap();
        let cfg = BackboneConfig { depth: 1, dim: 8, heads: 2, n_b2e: 1, prompt_len: 2, pool_size: 2, ..BackboneConfig::desk() };
        let model = build_model(&cfg, 0).unwrap();
        for mode in [SelectMode::FullAverage, SelectMode::HalfAverage, SelectMode::Random] {
            let a = evaluate(&model, &test, "aware:50", mode, 1).unwrap();
            let b = evaluate(&model, &test, "aware:50", mode, 1).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.predictions.len(), 20);
            assert!(a.predictions.iter().all(|p| p.qp == Some(50) && p.y_c == 1));
        }
    }
}
