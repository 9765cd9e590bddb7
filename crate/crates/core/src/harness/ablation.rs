//! One-axis sweeps: train per value, evaluate under each protocol.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::config::{Components, TrainConfig};
use super::eval::{evaluate, load_training_data, test_samples};
use super::train::train;
use crate::data::Protocol;
use crate::error::{Error, Result};
use crate::oda::Metric;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Components,
    Distance,
    PromptSelection,
    PoolSize,
    PromptLength,
    RgDepth,
    CgDepth,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::Components,
        Axis::Distance,
        Axis::PromptSelection,
        Axis::PoolSize,
        Axis::PromptLength,
        Axis::RgDepth,
        Axis::CgDepth,
    ];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Components => "components",
            Axis::Distance => "distance",
            Axis::PromptSelection => "prompt-selection",
            Axis::PoolSize => "pool-size",
            Axis::PromptLength => "prompt-length",
            Axis::RgDepth => "rg-depth",
            Axis::CgDepth => "cg-depth",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

fn count(value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("expected a non-negative integer, got {value:?}")))
}

/// `base` with only the chosen axis set to `value`.
pub fn apply_axis(base: &TrainConfig, axis: Axis, value: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match axis {
        Axis::Components => value.parse::<Components>()?.apply(&mut cfg),
        Axis::Distance => {
            let d = &mut cfg.loss.distance;
            match value {
                "cosine" => d.metric = Metric::Cosine,
                v => {
                    let p = v
                        .strip_prefix('l')
                        .and_then(|p| p.parse::<f64>().ok())
                        .ok_or_else(|| Error::Config(format!("distance is l<p> or cosine, got {v:?}")))?;
                    d.metric = Metric::Minkowski;
                    d.p = p;
                }
            }
        }
        Axis::PromptSelection => cfg.selection = value.parse()?,
        Axis::PoolSize => cfg.backbone.pool_size = count(value)?,
        Axis::PromptLength => cfg.backbone.prompt_len = count(value)?,
        Axis::RgDepth => {
            let k = count(value)?;
            cfg.backbone.n_b2e = cfg.backbone.n_b2e.min(k);
            cfg.backbone.guided_depth = Some(k);
        }
        Axis::CgDepth => {
            let k = count(value)?;
            cfg.backbone.n_b2e = k;
            if let Some(g) = cfg.backbone.guided_depth {
                cfg.backbone.guided_depth = Some(g.max(k));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub protocol: String,
    pub accuracy: f64,
    pub ap: f64,
}

/// Trains one run per value and evaluates each on `n_test` held-out images per protocol.
/// With `out`, every run gets a subdirectory and the table lands in `ablation.csv`.
pub fn run_ablation(
    base: &TrainConfig,
    axis: Axis,
    values: &[String],
    protocols: &[Protocol],
    n_test: usize,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let configs = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let (manifest, samples) = load_training_data(base)?;
    let tests = protocols
        .iter()
        .map(|&p| Ok((p, test_samples(&manifest, n_test, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let run_dir = out.map(|d| d.join(format!("{axis}_{value}")));
        let outcome = train(cfg, &samples, run_dir.as_deref())?;
        for (p, test) in &tests {
            let r = evaluate(&outcome.model, test, &p.to_string(), cfg.selection.infer, cfg.seed)?;
            rows.push(AblationRow {
                axis: axis.to_string(),
                value: value.clone(),
                protocol: r.protocol,
                accuracy: r.accuracy,
                ap: r.ap,
            });
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}
