use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// What the model is being used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Pretrain,
    Detect,
    Intensity,
}

impl Task {
    pub fn is_finetune(self) -> bool {
        !matches!(self, Task::Pretrain)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Task::Pretrain => 0,
            Task::Detect => 1,
            Task::Intensity => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Task::Pretrain),
            1 => Some(Task::Detect),
            2 => Some(Task::Intensity),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pretrain => "pretrain",
            Task::Detect => "detect",
            Task::Intensity => "intensity",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Task::Pretrain),
            "detect" => Ok(Task::Detect),
            "intensity" => Ok(Task::Intensity),
            other => Err(format!("unknown task {other:?} (expected pretrain, detect or intensity)")),
        }
    }
}

/// Geometry and hyperparameters of the masked autoencoder and its task head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub enc_depth: usize,
    pub enc_width: usize,
    pub enc_heads: usize,
    pub dec_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub mlp_ratio: f64,
    pub num_aus: usize,
    pub mask_ratio: f64,
    /// Standardize each reconstruction target patch.
    pub norm_pix_target: bool,
    pub task: Task,
}

pub const LN_EPS: f64 = 1e-6;

impl ModelConfig {
    /// ViT-Base encoder with the 8 x 512 decoder, 224 px RGB input.
    pub fn paper_base() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            enc_depth: 12,
            enc_width: 768,
            enc_heads: 12,
            dec_depth: 8,
            dec_width: 512,
            dec_heads: 16,
            mlp_ratio: 4.0,
            num_aus: 12,
            mask_ratio: 0.75,
            norm_pix_target: true,
            task: Task::Pretrain,
        }
    }

    /// CPU-sized preset: 32 px grayscale, 4 px patches (64 tokens).
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 4,
            enc_depth: 4,
            enc_width: 128,
            enc_heads: 4,
            dec_depth: 2,
            dec_width: 64,
            dec_heads: 4,
            mlp_ratio: 4.0,
            num_aus: 4,
            mask_ratio: 0.75,
            norm_pix_target: true,
            task: Task::Pretrain,
        }
    }

    pub fn with_task(mut self, task: Task) -> Self {
        self.task = task;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.enc_heads == 0 || self.enc_width % self.enc_heads != 0 {
            return bad(format!("enc_width {} not divisible by enc_heads {}", self.enc_width, self.enc_heads));
        }
        if self.dec_heads == 0 || self.dec_width % self.dec_heads != 0 {
            return bad(format!("dec_width {} not divisible by dec_heads {}", self.dec_width, self.dec_heads));
        }
        if self.enc_width % 4 != 0 || self.dec_width % 4 != 0 {
            return bad("widths must be divisible by 4 for the sin-cos tables".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.num_aus == 0 {
            return bad("num_aus must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden(self.enc_width) == 0 {
            return bad(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Pixel values per patch, `p² · C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self, width: usize) -> usize {
        (width as f64 * self.mlp_ratio).round() as usize
    }
}
