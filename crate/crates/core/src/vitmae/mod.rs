//! Vision-transformer masked autoencoder with a pooled task head.

pub mod checkpoint;
mod config;
mod mask;
mod model;
mod params;
mod patch;

pub use checkpoint::{load_encoder, load_weights, save_weights, CheckpointError};
pub use config::{ModelConfig, Task, LN_EPS};
pub use mask::{sample_mask, visible_count, MaskPlan};
pub use model::{block_forward, classify, decode, encode, used_by_task, xavier_bound, BoundParams, ModelWeights};
pub use params::{layout, BlockParams, DecoderParams, EncoderParams, Group, HeadParams, ParamKind, ParamSpec, Params};
pub use patch::{patchify, pos_embed_sincos, unpatchify};

use crate::ndgrad::GradError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("model task is {found}, operation needs {expected}")]
    TaskMismatch { expected: &'static str, found: Task },
    #[error(transparent)]
    Grad(#[from] GradError),
}
