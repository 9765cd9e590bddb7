//! Synthetic real/fake corpus.

mod batch;
mod dataset;
pub mod synth;

pub use batch::{batches, epoch_order, eval_batches, images_to_tensor, Batch, BatchPartition};
pub use dataset::{
    build_dataset, load_dataset, make_test_set, read_samples, save_dataset, write_samples, Dataset, DatasetManifest,
    Protocol, QpRegime, Sample, TestSpec,
};
pub use synth::{gen_fake, gen_real, FingerprintConfig, IMAGE_SIZE};
