//! Optimization, schedules, regularizers and the two training loops.

mod augment;
mod config;
mod loops;
mod optim;
mod partial;
mod regularize;
mod schedule;

use std::path::{Path, PathBuf};

pub use augment::{
    apply_op, augment_batch, cutmix, cutmix_with, mixup, mixup_with, randaug_light, random_resized_crop, AugOp, CutBox,
    MixConfig, Mixed, Mode, AUG_OPS,
};
pub use config::{ConfigError, PaperDataset, RunConfig, TrainConfig, SCHEMA_VERSION};
pub use loops::{
    batch_indices, data_order_hash, evaluate, finetune, predict, pretrain, reconstruction_loss, samples_from, EvalSet, Observer,
    Sample, Silent, StepPlan, TraceRow, TrainOutcome,
};
pub use optim::{adamw_step, adamw_update, AdamW, OptimState};
pub use partial::{partial_protocol, partial_schedule, PARTIAL_SCHEDULES};
pub use regularize::{drop_path, DropPath};
pub use schedule::{lr_at, steps_per_epoch};

use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::ndgrad::GradError;
use crate::vitmae::{CheckpointError, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("label mismatch: {0}")]
    Labels(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("bad training state: {0}")]
    State(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.to_path_buf(), source }
    }
}
