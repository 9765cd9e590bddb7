//! Training, evaluation, ablation and feature export.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod train;

pub use ablation::{apply_axis, run_ablation, AblationRow, Axis};
pub use config::{Components, DataSource, TrainConfig};
pub use eval::{evaluate, load_training_data, test_samples, EvalReport};
pub use features::export_features;
pub use metrics::{accuracy, average_precision};
pub use optim::{Adam, AdamConfig};
pub use train::{train, EpochSummary, StepMetrics, TrainOutcome};
