//! Run configuration, mirrored field for field by the JSON config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::attention::PromptSelection;
use crate::data::{DatasetManifest, QpRegime};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, LayerKind};
use crate::oda::LossConfig;

/// Where the training set comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A directory written by `gen-data`.
    Dir(PathBuf),
    /// Generated in memory from the manifest.
    Generate(DatasetManifest),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    pub selection: PromptSelection,
    /// Feed paired rows to the compression head through the reversal node.
    pub compression_branch: bool,
    /// Backward multiplier of the reversal node (negative).
    pub reversal_scale: f64,
    pub data: DataSource,
}

pub const DEFAULT_ALPHA: f64 = 0.004;

impl TrainConfig {
    /// Full method on the desk-scale task: 4000 images, 20% paired, JPEG quality 50.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            seed,
            epochs: 15,
            batch: 32,
            lr: 2e-4,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            backbone: BackboneConfig::desk(),
            selection: PromptSelection::default(),
            compression_branch: true,
            reversal_scale: -1.0,
            data: DataSource::Generate(DatasetManifest::new(seed, 4000, 0.2, QpRegime::Fixed(50))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch < 4 {
            return bad(format!("batch must be at least 4, got {}", self.batch));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("adam needs betas in [0, 1) and eps > 0, got {a:?}"));
        }
        if !(self.reversal_scale < 0.0) {
            return bad(format!("reversal_scale must be negative, got {}", self.reversal_scale));
        }
        self.loss.validate()?;
        self.backbone.validate()?;
        self.selection.validate()?;
        if let DataSource::Generate(m) = &self.data {
            m.validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The manifest of the training data, when it is known without reading a directory.
    pub fn manifest(&self) -> Option<&DatasetManifest> {
        match &self.data {
            DataSource::Generate(m) => Some(m),
            DataSource::Dir(_) => None,
        }
    }
}

/// Method variants compared by the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Components {
    /// Plain attention, no compression branch, no aggregation loss.
    Baseline,
    /// Baseline plus the aggregation loss.
    Oda,
    /// Residual guidance in every layer with the adversarial compression branch.
    Rg,
    /// Coordination guidance in the shallow layers with the compression branch.
    Cg,
    /// Residual plus coordination guidance in the shallow layers, residual
    /// guidance deeper, with the compression branch.
    B2e,
    /// Everything: B2E plus the aggregation loss.
    Full,
}

impl Components {
    pub const ALL: [Components; 6] = [
        Components::Baseline,
        Components::Oda,
        Components::Rg,
        Components::Cg,
        Components::B2e,
        Components::Full,
    ];

    pub fn apply(self, cfg: &mut TrainConfig) {
        use LayerKind::*;
        let (shallow, deep, branch, oda) = match self {
            Components::Baseline => (Msa, Msa, false, false),
            Components::Oda => (Msa, Msa, false, true),
            Components::Rg => (Rg, Rg, true, false),
            Components::Cg => (MsaCg, Msa, true, false),
            Components::B2e => (RgCg, Rg, true, false),
            Components::Full => (RgCg, Rg, true, true),
        };
        cfg.backbone.shallow = shallow;
        cfg.backbone.deep = deep;
        cfg.compression_branch = branch;
        cfg.loss.alpha = if oda { DEFAULT_ALPHA } else { 0.0 };
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Components::Baseline => "baseline",
            Components::Oda => "oda",
            Components::Rg => "rg",
            Components::Cg => "cg",
            Components::B2e => "b2e",
            Components::Full => "full",
        })
    }
}

impl FromStr for Components {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().trim_start_matches('+').to_ascii_lowercase();
        Components::ALL
            .into_iter()
            .find(|c| c.to_string() == key)
            .ok_or_else(|| Error::Config(format!("unknown component set {s:?}; expected baseline, oda, rg, cg, b2e or full")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid_and_round_trips() {
        let cfg = TrainConfig::desk(7);
        cfg.validate().unwrap();
        let back: TrainConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.batch, 32);
        assert_eq!(cfg.loss.alpha, DEFAULT_ALPHA);
    }

    #[test]
    fn components_toggle_the_expected_pieces() {
        for c in Components::ALL {
            let mut cfg = TrainConfig::desk(0);
            c.apply(&mut cfg);
            cfg.validate().unwrap();
            assert_eq!(c.to_string().parse::<Components>().unwrap(), c);
        }
        let mut cfg = TrainConfig::desk(0);
        Components::Baseline.apply(&mut cfg);
        assert!(!cfg.compression_branch && cfg.loss.alpha == 0.0);
        assert!(cfg.backbone.layer_plan().iter().all(|k| *k == LayerKind::Msa));
        assert_eq!("+ODA".parse::<Components>().unwrap(), Components::Oda);
        assert!("nope".parse::<Components>().is_err());
    }

    #[test]
    fn invalid_fields_are_rejected() {
        let mut cfg = TrainConfig::desk(0);
        cfg.reversal_scale = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(0);
        cfg.batch = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk(0);
        cfg.data = DataSource::Generate(DatasetManifest::new(0, 100, 0.7, QpRegime::Fixed(50)));
        assert!(cfg.validate().is_err());
    }
}
