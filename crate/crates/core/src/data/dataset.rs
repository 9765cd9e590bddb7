//! Training/test corpora: the paired/unpaired partition, QP regimes, and on-disk layout.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synth::{generate_one, image_rng, FingerprintConfig};
use crate::error::{validation, Error, Result};
use crate::image::Image;
use crate::jpeg::CompressionRecord;

/// How compressed twins pick their quality factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpRegime {
    Fixed(u32),
    Uniform(u32, u32),
}

impl QpRegime {
    fn validate(&self) -> Result<()> {
        let ok = |q: u32| (1..=100).contains(&q);
        match *self {
            QpRegime::Fixed(q) if ok(q) => Ok(()),
            QpRegime::Uniform(lo, hi) if ok(lo) && ok(hi) && lo <= hi => Ok(()),
            other => validation(format!("invalid qp regime {other}: qualities must lie in 1..=100")),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match *self {
            QpRegime::Fixed(q) => q,
            QpRegime::Uniform(lo, hi) => rng.gen_range(lo..=hi),
        }
    }
}

impl fmt::Display for QpRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QpRegime::Fixed(q) => write!(f, "fixed:{q}"),
            QpRegime::Uniform(lo, hi) => write!(f, "uniform:{lo}-{hi}"),
        }
    }
}

fn parse_qp(s: &str) -> Result<u32> {
    s.trim()
        .parse()
        .map_err(|_| Error::Validation(format!("bad quality value {s:?}")))
}

impl FromStr for QpRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let regime = match s.split_once(':') {
            Some(("fixed", q)) => QpRegime::Fixed(parse_qp(q)?),
            Some(("uniform", range)) => {
                let (lo, hi) = range
                    .split_once('-')
                    .ok_or_else(|| Error::Validation(format!("uniform regime needs lo-hi, got {range:?}")))?;
                QpRegime::Uniform(parse_qp(lo)?, parse_qp(hi)?)
            }
            _ => return validation(format!("qp regime must be fixed:Q or uniform:LO-HI, got {s:?}")),
        };
        regime.validate()?;
        Ok(regime)
    }
}

impl Serialize for QpRegime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QpRegime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_total: usize,
    pub paired_fraction: f64,
    pub qp_regime: QpRegime,
    /// Fraction of raw samples that are fake.
    pub class_balance: f64,
    pub fingerprint: FingerprintConfig,
}

impl DatasetManifest {
    pub fn new(seed: u64, n_total: usize, paired_fraction: f64, qp_regime: QpRegime) -> Self {
        DatasetManifest {
            seed,
            n_total,
            paired_fraction,
            qp_regime,
            class_balance: 0.5,
            fingerprint: FingerprintConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_total == 0 {
            return validation("n_total must be positive");
        }
        if !(0.0..=0.5).contains(&self.paired_fraction) {
            return validation(format!(
                "paired_fraction {} out of range: paired data is limited to no more than 50% of the dataset",
                self.paired_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return validation(format!("class_balance must lie in [0, 1], got {}", self.class_balance));
        }
        let s = self.fingerprint.strength;
        if !(s > 0.0 && s <= 1.0) {
            return validation(format!("fingerprint strength must be in (0, 1], got {s}"));
        }
        if self.fingerprint.grain_lo < 0.0 || self.fingerprint.grain_hi < self.fingerprint.grain_lo {
            return validation("grain range must satisfy 0 <= grain_lo <= grain_hi");
        }
        self.qp_regime.validate()
    }

    /// Generator seeds used by the raw images.
    pub fn seed_range(&self) -> std::ops::Range<u64> {
        self.seed..self.seed + self.n_total as u64
    }

    pub fn n_fake(&self) -> usize {
        (self.n_total as f64 * self.class_balance).round() as usize
    }

    pub fn n_pairs(&self) -> usize {
        (self.n_total as f64 * self.paired_fraction).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub y: u8,
    pub y_c: u8,
    pub record: Option<CompressionRecord>,
    pub pair_id: Option<usize>,
}

impl Sample {
    pub fn qp(&self) -> Option<u8> {
        self.record.as_ref().map(|r| r.qp)
    }

    pub fn is_paired(&self) -> bool {
        self.pair_id.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Salt separating the auxiliary random streams from per-image generator seeds.
const LABEL_STREAM: u64 = 0x6c61_6265_6c73;
const PAIR_STREAM: u64 = 0x7061_6972_7321;
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c;

fn stream(seed: u64, salt: u64) -> rand_chacha::ChaCha8Rng {
    image_rng(seed ^ salt.rotate_left(17))
}

fn compressed_twin(raw: &Sample, qp: u32) -> Result<Sample> {
    let (image, record) = crate::jpeg::compress_with_record(&raw.image, qp)?;
    Ok(Sample {
        image,
        y: raw.y,
        y_c: 1,
        record: Some(record),
        pair_id: raw.pair_id,
    })
}

pub fn build_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let n = manifest.n_total;
    let mut labels: Vec<u8> = (0..n).map(|i| (i < manifest.n_fake()) as u8).collect();
    labels.shuffle(&mut stream(manifest.seed, LABEL_STREAM));

    let raw: Vec<Sample> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let strength = (y == 1).then_some(manifest.fingerprint.strength);
            Sample {
                image: generate_one(manifest.seed + i as u64, strength, &manifest.fingerprint),
                y,
                y_c: 0,
                record: None,
                pair_id: None,
            }
        })
        .collect();

    // stratified pick of P so the compressed subset keeps the class ratio
    let mut rng = stream(manifest.seed, PAIR_STREAM);
    let n_pairs = manifest.n_pairs();
    let n_fake_pairs = ((n_pairs as f64) * manifest.class_balance).round() as usize;
    let mut chosen = Vec::with_capacity(n_pairs);
    for (class, want) in [(1u8, n_fake_pairs), (0u8, n_pairs - n_fake_pairs)] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let take = want.min(idx.len());
        chosen.extend_from_slice(&idx[..take]);
    }
    chosen.sort_unstable();

    let mut samples = raw;
    let mut twins = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        samples[i].pair_id = Some(i);
        let qp = manifest.qp_regime.sample(&mut rng);
        twins.push(compressed_twin(&samples[i], qp)?);
    }
    samples.extend(twins);
    samples.shuffle(&mut stream(manifest.seed, SHUFFLE_STREAM));
    Ok(Dataset {
        manifest: manifest.clone(),
        samples,
    })
}

/// Test-time compression protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    QualityAware(u32),
    QualityAgnostic(u32, u32),
    Raw,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::QualityAware(q) => write!(f, "aware:{q}"),
            Protocol::QualityAgnostic(lo, hi) => write!(f, "agnostic:{lo}-{hi}"),
            Protocol::Raw => write!(f, "raw"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = match s.split_once(':') {
            None if s == "raw" => Protocol::Raw,
            Some(("aware", q)) => Protocol::QualityAware(parse_qp(q)?),
            Some(("agnostic", range)) => {
                let (lo, hi) = range
                    .split_once('-')
                    .ok_or_else(|| Error::Validation(format!("agnostic protocol needs lo-hi, got {range:?}")))?;
                Protocol::QualityAgnostic(parse_qp(lo)?, parse_qp(hi)?)
            }
            _ => return validation(format!("protocol must be aware:Q, agnostic:LO-HI or raw, got {s:?}")),
        };
        p.regime().map(|r| r.validate()).transpose()?;
        Ok(p)
    }
}

impl Protocol {
    fn regime(&self) -> Option<QpRegime> {
        match *self {
            Protocol::QualityAware(q) => Some(QpRegime::Fixed(q)),
            Protocol::QualityAgnostic(lo, hi) => Some(QpRegime::Uniform(lo, hi)),
            Protocol::Raw => None,
        }
    }
}

/// Where a held-out set draws its images from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestSpec {
    pub seed: u64,
    pub n: usize,
}

impl TestSpec {
    /// A test range placed just past the training seeds.
    pub fn after(train: &DatasetManifest, n: usize) -> Self {
        TestSpec {
            seed: train.seed + train.n_total as u64 + 1_000_003,
            n,
        }
    }
}

/// Balanced held-out samples compressed per `protocol`; every sample has `pair_id = None`.
pub fn make_test_set(train: &DatasetManifest, spec: TestSpec, protocol: Protocol) -> Result<Vec<Sample>> {
    train.validate()?;
    if spec.n == 0 {
        return validation("test set size must be positive");
    }
    let test_range = spec.seed..spec.seed + spec.n as u64;
    let train_range = train.seed_range();
    if test_range.start < train_range.end && train_range.start < test_range.end {
        return validation(format!(
            "test seeds {test_range:?} overlap the training seeds {train_range:?}"
        ));
    }
    if let Some(r) = protocol.regime() {
        r.validate()?;
    }
    let mut labels: Vec<u8> = (0..spec.n).map(|i| (i % 2) as u8).collect();
    let mut rng = stream(spec.seed, LABEL_STREAM);
    labels.shuffle(&mut rng);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let strength = (y == 1).then_some(train.fingerprint.strength);
            let image = generate_one(spec.seed + i as u64, strength, &train.fingerprint);
            let raw = Sample {
                image,
                y,
                y_c: 0,
                record: None,
                pair_id: None,
            };
            match protocol.regime() {
                None => Ok(raw),
                Some(regime) => compressed_twin(&raw, regime.sample(&mut rng)),
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    file: String,
    y: u8,
    y_c: u8,
    qp: Option<u8>,
    pair_id: Option<usize>,
}

fn sample_file(i: usize) -> String {
    format!("img_{i:06}.ppm")
}

pub fn write_samples(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("samples.csv"))?;
    for (i, s) in samples.iter().enumerate() {
        let file = sample_file(i);
        s.image.save(&dir.join(&file))?;
        w.serialize(SampleRow {
            file,
            y: s.y,
            y_c: s.y_c,
            qp: s.qp(),
            pair_id: s.pair_id,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(dir: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(dir.join("samples.csv"))?;
    let mut samples = Vec::new();
    for row in r.deserialize::<SampleRow>() {
        let row = row?;
        if row.y > 1 || row.y_c > 1 || (row.y_c == 1) != row.qp.is_some() {
            return validation(format!("inconsistent labels in samples.csv row for {}", row.file));
        }
        samples.push(Sample {
            image: Image::load(&dir.join(&row.file))?,
            y: row.y,
            y_c: row.y_c,
            record: row.qp.map(|qp| CompressionRecord {
                qp,
                source_hash: String::new(),
            }),
            pair_id: row.pair_id,
        });
    }
    // the source digest is implied by the raw twin
    let raw_digest: std::collections::HashMap<usize, String> = samples
        .iter()
        .filter(|s| s.y_c == 0)
        .filter_map(|s| s.pair_id.map(|p| (p, s.image.digest())))
        .collect();
    for s in samples.iter_mut() {
        if let (Some(rec), Some(p)) = (s.record.as_mut(), s.pair_id) {
            rec.source_hash = raw_digest.get(&p).cloned().unwrap_or_default();
        }
    }
    Ok(samples)
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&ds.manifest)?)?;
    write_samples(dir, &ds.samples)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    manifest.validate()?;
    Ok(Dataset {
        manifest,
        samples: read_samples(dir)?,
    })
}

