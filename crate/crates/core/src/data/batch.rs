//! Per-epoch minibatching.

use rand::seq::SliceRandom;

use super::dataset::Sample;
use super::synth::image_rng;
use crate::error::{validation, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Row indices of a batch split by (real/fake, raw/compressed).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchPartition {
    pub real_raw: Vec<usize>,
    pub real_cmp: Vec<usize>,
    pub fake_raw: Vec<usize>,
    pub fake_cmp: Vec<usize>,
}

impl BatchPartition {
    pub fn from_labels(y: &[u8], y_c: &[u8]) -> Self {
        let mut p = BatchPartition::default();
        for (i, (&a, &c)) in y.iter().zip(y_c).enumerate() {
            p.state_mut(a, c).push(i);
        }
        p
    }

    pub fn state(&self, y: u8, y_c: u8) -> &[usize] {
        match (y, y_c) {
            (0, 0) => &self.real_raw,
            (0, _) => &self.real_cmp,
            (_, 0) => &self.fake_raw,
            _ => &self.fake_cmp,
        }
    }

    fn state_mut(&mut self, y: u8, y_c: u8) -> &mut Vec<usize> {
        match (y, y_c) {
            (0, 0) => &mut self.real_raw,
            (0, _) => &mut self.real_cmp,
            (_, 0) => &mut self.fake_raw,
            _ => &mut self.fake_cmp,
        }
    }

    /// The four states in a fixed order: real-raw, real-cmp, fake-raw, fake-cmp.
    pub fn states(&self) -> [(u8, u8, &[usize]); 4] {
        [
            (0, 0, &self.real_raw),
            (0, 1, &self.real_cmp),
            (1, 0, &self.fake_raw),
            (1, 1, &self.fake_cmp),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, H, W]`, pixel values scaled to `[0, 1]`.
    pub images: Tensor,
    pub y: Vec<u8>,
    pub y_c: Vec<u8>,
    pub paired_mask: Vec<bool>,
    pub partition: BatchPartition,
    /// `(raw row, compressed row)` for every twin pair that landed in this batch.
    pub twins: Vec<(usize, usize)>,
    /// Dataset indices of the rows.
    pub source: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn from_samples(samples: &[Sample], rows: &[usize]) -> Result<Self> {
        let picked: Vec<&Sample> = rows.iter().map(|&i| &samples[i]).collect();
        let images = images_to_tensor(&picked.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let y: Vec<u8> = picked.iter().map(|s| s.y).collect();
        let y_c: Vec<u8> = picked.iter().map(|s| s.y_c).collect();
        let mut twins = Vec::new();
        for (r, s) in picked.iter().enumerate() {
            if s.y_c != 0 {
                continue;
            }
            if let Some(p) = s.pair_id {
                if let Some(c) = picked.iter().position(|t| t.y_c == 1 && t.pair_id == Some(p)) {
                    twins.push((r, c));
                }
            }
        }
        Ok(Batch {
            images,
            partition: BatchPartition::from_labels(&y, &y_c),
            paired_mask: picked.iter().map(|s| s.is_paired()).collect(),
            y,
            y_c,
            twins,
            source: rows.to_vec(),
        })
    }
}

/// Stacks equally sized images into a `[B, 3, H, W]` tensor in `[0, 1]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return validation("cannot batch zero images");
    };
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return validation("images in a batch must share dimensions");
        }
        for c in 0..3 {
            data.extend(img.pixels().iter().skip(c).step_by(3).map(|&p| p as f64 / 255.0));
        }
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}

const EPOCH_STREAM: u64 = 0x6570_6f63_6821;

/// Row order for one epoch. Twins travel together so the pair usually shares a batch.
pub fn epoch_order(samples: &[Sample], seed: u64, epoch: usize) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        match s.pair_id {
            Some(p) => match slot.get(&p) {
                Some(&g) => groups[g].push(i),
                None => {
                    slot.insert(p, groups.len());
                    groups.push(vec![i]);
                }
            },
            None => groups.push(vec![i]),
        }
    }
    let mut rng = image_rng(seed ^ EPOCH_STREAM ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
    groups.shuffle(&mut rng);
    groups.into_iter().flatten().collect()
}

/// Batches of one epoch; the trailing short batch is dropped.
pub fn batches(samples: &[Sample], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size < 4 {
        return validation(format!("batch_size must be at least 4, got {batch_size}"));
    }
    epoch_order(samples, seed, epoch)
        .chunks_exact(batch_size)
        .map(|rows| Batch::from_samples(samples, rows))
        .collect()
}

/// Consecutive fixed-size slices of `samples` for inference; the last one may be short.
pub fn eval_batches(samples: &[Sample], batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let chunks: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |rows| Batch::from_samples(samples, &rows))
}
