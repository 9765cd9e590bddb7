//! The optimisation loop.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::TrainConfig;
use super::metrics::accuracy;
use super::optim::Adam;
use crate::attention::SelectMode;
use crate::data::{batches, eval_batches, Batch, Sample};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, PromptPlan, Reversal};
use crate::oda::{self, TwinRows};
use crate::tensor::{sigmoid_value, Gradients, Tape, Tensor, Var};

const PROMPT_STREAM: u64 = 0x7072_6f6d_7074;

/// One optimiser step. Absent loss terms are empty in the CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub l_rf: f64,
    pub l_cmp: Option<f64>,
    pub l_dis: Option<f64>,
    pub l_dis_similarity: Option<f64>,
    pub l_dis_hsic: Option<f64>,
    pub beta: f64,
    pub l_all: f64,
    pub train_acc: f64,
    pub cmp_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_l_all: f64,
    pub mean_l_rf: f64,
    pub train_acc: f64,
    /// Compression-head accuracy over every paired training row, measured after the epoch.
    pub cmp_acc: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
}

fn labels(v: &[u8]) -> Tensor {
    Tensor::from_fn(&[v.len(), 1], |i| v[i] as f64)
}

fn grad_norm(g: &Gradients, vars: &[Var]) -> f64 {
    vars.iter().map(|&v| g.wrt(v).sq_norm()).sum::<f64>().sqrt()
}

fn paired_rows(b: &Batch) -> Vec<usize> {
    (0..b.len()).filter(|&i| b.paired_mask[i]).collect()
}

/// Picks the per-layer prompts for one training step.
fn training_plan(model: &Model, cfg: &TrainConfig, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<PromptPlan> {
    if !model.has_prompts() {
        return Ok(vec![None; cfg.backbone.depth]);
    }
    if cfg.selection.train != SelectMode::BeamSearch {
        return model.plan_prompts(cfg.selection.train, rng);
    }
    // one joint entry index across layers, scored by the real/fake loss with frozen weights
    let entries = model.pool_sizes().into_iter().max().unwrap_or(0);
    let target = labels(&batch.y);
    let mut best = (0, f64::INFINITY);
    for e in 0..entries {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, false);
        let out = model.forward(&mut tape, &b, &batch.images, &[], &model.uniform_plan(e), Reversal::Disabled)?;
        let l = tape.bce_with_logits(out.logit_rf, &target)?;
        let v = tape.value(l).item();
        if v < best.1 {
            best = (e, v);
        }
    }
    Ok(model.uniform_plan(best.0))
}

fn diverged(what: &str, epoch: usize, step: usize, detail: String) -> Error {
    Error::Divergence(format!("{what} at epoch {epoch}, step {step}: {detail}"))
}

/// Compression-head accuracy over the paired rows of `samples`, inference prompts.
pub fn compression_accuracy(model: &Model, samples: &[Sample], plan: &PromptPlan) -> Result<Option<f64>> {
    let paired: Vec<Sample> = samples.iter().filter(|s| s.is_paired()).cloned().collect();
    if paired.is_empty() {
        return Ok(None);
    }
    let mut scores = Vec::with_capacity(paired.len());
    let mut truth = Vec::with_capacity(paired.len());
    for batch in eval_batches(&paired, 64) {
        let batch = batch?;
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, false);
        let rows: Vec<usize> = (0..batch.len()).collect();
        let out = model.forward(&mut tape, &b, &batch.images, &rows, plan, Reversal::Disabled)?;
        let logits = out.logit_cmp.expect("every row is paired");
        scores.extend(tape.value(logits).data().iter().map(|&z| sigmoid_value(z)));
        truth.extend(batch.y_c);
    }
    Ok(Some(accuracy(&scores, &truth)))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Trains from scratch. With `out`, writes `config.json`, `metrics.csv`,
/// `epochs.csv` and `ckpt_epochN.plada` after every epoch.
pub fn train(cfg: &TrainConfig, samples: &[Sample], out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.len() < cfg.batch {
        return Err(Error::Validation(format!(
            "{} training samples cannot fill one batch of {}",
            samples.len(),
            cfg.batch
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), cfg.to_json()?)?;
    }
    let mut model = build_model(&cfg.backbone, cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.adam);
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROMPT_STREAM);
    let infer_plan = model.plan_prompts(cfg.selection.infer, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let oda_on = cfg.loss.alpha > 0.0;
    let mut prev_dis_norm = 0.0;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let first = steps.len();
        for batch in batches(samples, cfg.batch, cfg.seed, epoch)? {
            step += 1;
            let plan = training_plan(&model, cfg, &batch, &mut prompt_rng)?;
            let paired = if cfg.compression_branch { paired_rows(&batch) } else { Vec::new() };
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let fwd = model.forward(
                &mut tape,
                &bound,
                &batch.images,
                &paired,
                &plan,
                Reversal::Scale(cfg.reversal_scale),
            )?;
            let l_rf = tape.bce_with_logits(fwd.logit_rf, &labels(&batch.y))?;
            let cmp_truth: Vec<u8> = paired.iter().map(|&i| batch.y_c[i]).collect();
            let l_cmp = match fwd.logit_cmp {
                Some(z) => Some(tape.bce_with_logits(z, &labels(&cmp_truth))?),
                None => None,
            };
            let beta = oda::beta(cfg.loss.gamma, prev_dis_norm);
            let dis = if oda_on {
                let twins: Vec<TwinRows> = batch
                    .twins
                    .iter()
                    .map(|&(raw, compressed)| TwinRows { raw, compressed, y: batch.y[raw] })
                    .collect();
                oda::l_dis(&mut tape, fwd.h_rf, &batch.partition, &twins, &cfg.loss.distance, beta)?
            } else {
                None
            };
            let total = oda::total_loss(&mut tape, l_rf, l_cmp, dis.as_ref().map(|d| d.total), &cfg.loss, bound.vars())?;
            let l_all = tape.value(total).item();
            if !l_all.is_finite() {
                return Err(diverged("non-finite loss", epoch, step, format!("L_all = {l_all}")));
            }
            let grads = tape.backward(total)?;
            let norm = grad_norm(&grads, bound.vars());
            if !norm.is_finite() {
                return Err(diverged("non-finite gradient", epoch, step, format!("|g| = {norm}")));
            }
            if let Some(d) = &dis {
                prev_dis_norm = grad_norm(&tape.backward(d.total)?, bound.vars());
            }
            adam.update(&mut model.params, bound.vars(), &grads);

            let probs: Vec<f64> = tape.value(fwd.logit_rf).data().iter().map(|&z| sigmoid_value(z)).collect();
            let cmp_acc = fwd.logit_cmp.map(|z| {
                let p: Vec<f64> = tape.value(z).data().iter().map(|&v| sigmoid_value(v)).collect();
                accuracy(&p, &cmp_truth)
            });
            let val = |v: Option<Var>| v.map(|v| tape.value(v).item());
            steps.push(StepMetrics {
                step,
                epoch,
                l_rf: tape.value(l_rf).item(),
                l_cmp: val(l_cmp),
                l_dis: val(dis.as_ref().map(|d| d.total)),
                l_dis_similarity: val(dis.as_ref().and_then(|d| d.similarity)),
                l_dis_hsic: val(dis.as_ref().and_then(|d| d.hsic)),
                beta,
                l_all,
                train_acc: accuracy(&probs, &batch.y),
                cmp_acc,
            });
        }
        let this = &steps[first..];
        let n = this.len().max(1) as f64;
        epochs.push(EpochSummary {
            epoch,
            mean_l_all: this.iter().map(|s| s.l_all).sum::<f64>() / n,
            mean_l_rf: this.iter().map(|s| s.l_rf).sum::<f64>() / n,
            train_acc: this.iter().map(|s| s.train_acc).sum::<f64>() / n,
            cmp_acc: if cfg.compression_branch {
                compression_accuracy(&model, samples, &infer_plan)?
            } else {
                None
            },
        });
        if let Some(dir) = out {
            checkpoint::save(&model, &dir.join(format!("ckpt_epoch{epoch}.plada")))?;
            fs::write(dir.join("metrics.csv"), csv_bytes(&steps)?)?;
            fs::write(dir.join("epochs.csv"), csv_bytes(&epochs)?)?;
        }
    }
    Ok(TrainOutcome { model, steps, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetManifest, QpRegime};
    use crate::harness::config::{Components, DataSource};
    use crate::model::BackboneConfig;

    fn tiny(seed: u64, n: usize, paired: f64) -> (TrainConfig, Vec<Sample>) {
        let manifest = DatasetManifest::new(seed, n, paired, QpRegime::Fixed(50));
        let mut cfg = TrainConfig::desk(seed);
        cfg.backbone = BackboneConfig { depth: 2, dim: 8, heads: 2, prompt_len: 2, pool_size: 2, n_b2e: 1, ..BackboneConfig::desk() };
        cfg.epochs = 2;
        cfg.batch = 8;
        cfg.lr = 1e-3;
        cfg.data = DataSource::Generate(manifest.clone());
        (cfg, build_dataset(&manifest).unwrap().samples)
    }

    #[test]
    fn plain_run_has_no_auxiliary_terms() {
        let (mut cfg, samples) = tiny(1, 32, 0.0);
        Components::Baseline.apply(&mut cfg);
        let out = train(&cfg, &samples, None).unwrap();
        assert_eq!(out.steps.len(), 8);
        assert!(out.steps.iter().all(|s| s.l_cmp.is_none() && s.l_dis.is_none() && s.beta == 0.5));
        assert!(out.epochs.iter().all(|e| e.cmp_acc.is_none()));
    }

    #[test]
    fn full_run_logs_every_term_and_lags_beta() {
        let (cfg, samples) = tiny(2, 48, 0.5);
        let out = train(&cfg, &samples, None).unwrap();
        assert_eq!(out.steps[0].beta, 0.5);
        let betas: Vec<f64> = out.steps.iter().map(|s| s.beta).collect();
        assert!(betas.iter().all(|&b| (0.5..1.0).contains(&b)), "{betas:?}");
        assert!(betas[1] > 0.5, "{betas:?}");
        assert!(out.steps.iter().any(|s| s.l_cmp.is_some()));
        assert!(out.steps.iter().any(|s| s.l_dis_similarity.is_some()));
        assert!(out.steps.iter().any(|s| s.l_dis_hsic.is_some()));
        assert!(out.epochs.iter().all(|e| e.cmp_acc.is_some()));
    }

    #[test]
    fn reruns_write_identical_bytes() {
        let (cfg, samples) = tiny(3, 32, 0.5);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train(&cfg, &samples, Some(a.path())).unwrap();
        train(&cfg, &samples, Some(b.path())).unwrap();
        for f in ["config.json", "metrics.csv", "epochs.csv", "ckpt_epoch1.plada", "ckpt_epoch2.plada"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (mut cfg, samples) = tiny(4, 32, 0.0);
        cfg.lr = 1e300;
        cfg.epochs = 3;
        match train(&cfg, &samples, None) {
            Err(e) => assert_eq!(e.exit_code(), 2, "{e}"),
            Ok(_) => panic!("training with lr 1e300 should diverge"),
        }
    }

    #[test]
    fn beam_search_training_runs() {
        let (mut cfg, samples) = tiny(5, 16, 0.0);
        cfg.selection = "B-FA".parse().unwrap();
        cfg.epochs = 1;
        assert_eq!(train(&cfg, &samples, None).unwrap().steps.len(), 2);
    }
}
