//! Optimization, evaluation, metrics and checkpoints.

pub mod checkpoint;
mod metrics;
mod optim;
mod train;

pub use metrics::MetricsReport;
pub use optim::{collect_grads, cosine_lr, global_grad_norm, Sgd};
pub use train::{
    evaluate, fit, predict_labels, EpochRecord, FitSummary, StepRecord, TrainConfig, Trainer,
    BEST_CHECKPOINT, MAX_BAD_STEPS, METRICS_FILE, METRICS_HEADER, STEPS_FILE,
};
