//! Training hyperparameters and the `key = value` run-config file.
//!
//! ```text
//! # comments start with '#'
//! schema = 1
//! task = pretrain            # pretrain | detect | intensity
//! epochs = 800
//! model.enc_depth = 12
//! ```
//!
//! Model keys carry a `model.` prefix, run bookkeeping (paths, init mode)
//! uses `run.`; everything else is a [`TrainConfig`] field. Unknown keys are
//! rejected. Floats are written in shortest round-trip form, so a snapshot
//! reproduces a run bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::losses::{LossFlavor, Reduction};
use crate::vitmae::{ModelConfig, Task};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Learning rate per 256 samples; the peak is `base_lr · batch / 256`.
    pub base_lr: f64,
    pub min_lr: f64,
    /// Samples per forward/backward pass.
    pub batch_size: usize,
    /// Passes accumulated per optimizer step (effective batch = batch_size · accum_steps).
    pub accum_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub drop_path_rate: f64,
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    /// Chance of cutmix instead of mixup when both are enabled.
    pub mix_switch_prob: f64,
    pub randaug_magnitude: f64,
    pub randaug_prob: f64,
    pub label_smoothing: f64,
    pub reduction: Reduction,
    pub loss: LossFlavor,
    /// Smallest random-crop area fraction during pre-training (1 disables cropping).
    pub crop_scale_min: f64,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    /// Save a resumable state every this many steps (0: never mid-run).
    pub checkpoint_every: usize,
    /// Train only the head (linear probe).
    pub freeze_encoder: bool,
    /// Stop after this many optimizer steps; the schedule is unaffected.
    pub max_steps: Option<usize>,
}

/// Labeled datasets whose fine-tuning learning rates are tabulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaperDataset {
    Bp4d,
    Bp4dPlus,
    Disfa,
}

impl TrainConfig {
    fn base(task: Task) -> Self {
        Self {
            task,
            epochs: 1,
            warmup_epochs: 0,
            base_lr: 1e-4,
            min_lr: 0.0,
            batch_size: 1,
            accum_steps: 1,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: if task == Task::Pretrain { 0.95 } else { 0.999 },
            adam_eps: 1e-8,
            seed: 0,
            drop_path_rate: 0.0,
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            mix_switch_prob: 0.5,
            randaug_magnitude: 0.0,
            randaug_prob: 0.0,
            label_smoothing: 0.0,
            reduction: Reduction::Mean,
            loss: LossFlavor::L1,
            crop_scale_min: 1.0,
            eval_every: 0,
            checkpoint_every: 0,
            freeze_encoder: false,
            max_steps: None,
        }
    }

    /// Full-scale pre-training recipe.
    pub fn pretrain_paper() -> Self {
        Self {
            epochs: 800,
            warmup_epochs: 40,
            base_lr: 1.5e-4,
            batch_size: 4096,
            crop_scale_min: 0.6,
            ..Self::base(Task::Pretrain)
        }
    }

    /// Full-scale fine-tuning recipe for `task` on `dataset`.
    pub fn finetune_paper(task: Task, dataset: PaperDataset) -> Result<Self, String> {
        let base_lr = match (task, dataset) {
            (Task::Detect, PaperDataset::Bp4d) => 1e-4,
            (Task::Detect, PaperDataset::Bp4dPlus | PaperDataset::Disfa) => 2e-4,
            (Task::Intensity, PaperDataset::Bp4d) => 3e-5,
            (Task::Intensity, PaperDataset::Disfa) => 1.5e-4,
            (Task::Intensity, PaperDataset::Bp4dPlus) => {
                return Err("no intensity recipe for BP4D+".into());
            }
            (Task::Pretrain, _) => return Err("pretrain is not a fine-tuning task".into()),
        };
        let mut c = Self {
            epochs: 20,
            warmup_epochs: 10,
            base_lr,
            batch_size: 512,
            drop_path_rate: 0.1,
            randaug_magnitude: 9.0,
            randaug_prob: 0.5,
            ..Self::base(task)
        };
        if task == Task::Detect {
            c.mixup_alpha = 0.2;
            c.cutmix_alpha = 0.75;
        }
        Ok(c)
    }

    /// Small pre-training run for a single CPU.
    pub fn pretrain_desk() -> Self {
        Self {
            epochs: 40,
            warmup_epochs: 4,
            base_lr: 1.5e-4,
            batch_size: 64,
            crop_scale_min: 0.6,
            ..Self::base(Task::Pretrain)
        }
    }

    /// Small fine-tuning run for a single CPU.
    pub fn finetune_desk(task: Task) -> Self {
        let mut c = Self {
            epochs: 30,
            warmup_epochs: 5,
            base_lr: 1e-3,
            batch_size: 32,
            drop_path_rate: 0.1,
            randaug_magnitude: 9.0,
            randaug_prob: 0.5,
            eval_every: 5,
            ..Self::base(task)
        };
        if task == Task::Detect {
            c.mixup_alpha = 0.2;
            c.cutmix_alpha = 0.75;
        }
        c
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    /// Peak learning rate from the linear scaling rule.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.effective_batch() as f64 / 256.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size < 1 || self.accum_steps < 1 {
            return Err("batch_size and accum_steps must be at least 1".into());
        }
        if self.epochs < 1 {
            return Err("epochs must be at least 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return Err(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        let rates = [
            ("base_lr", self.base_lr),
            ("min_lr", self.min_lr),
            ("weight_decay", self.weight_decay),
            ("adam_eps", self.adam_eps),
            ("drop_path_rate", self.drop_path_rate),
            ("mixup_alpha", self.mixup_alpha),
            ("cutmix_alpha", self.cutmix_alpha),
            ("randaug_magnitude", self.randaug_magnitude),
            ("label_smoothing", self.label_smoothing),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        let probs = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("mix_switch_prob", self.mix_switch_prob),
            ("randaug_prob", self.randaug_prob),
            ("label_smoothing", self.label_smoothing),
        ];
        for (name, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.drop_path_rate >= 1.0 {
            return Err(format!("drop_path_rate must be below 1, got {}", self.drop_path_rate));
        }
        if self.randaug_magnitude > 10.0 {
            return Err(format!("randaug_magnitude must lie in [0, 10], got {}", self.randaug_magnitude));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(format!("crop_scale_min must lie in (0, 1], got {}", self.crop_scale_min));
        }
        Ok(())
    }
}

/// Everything a command needs to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `run.*` keys (paths, init mode, ...), kept verbatim.
    pub run: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("bad value {value:?} for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("bad value {value:?} for {key}: expected true or false")),
    }
}

impl RunConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self { model, train, run: BTreeMap::new() }
    }

    /// Model config with the task taken from the training config.
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().with_task(self.train.task)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "schema" => {
                let v: u32 = parse(key, value)?;
                if v != SCHEMA_VERSION {
                    return Err(format!("config schema {v} (this build reads {SCHEMA_VERSION})"));
                }
            }
            "model.image_size" => m.image_size = parse(key, value)?,
            "model.channels" => m.channels = parse(key, value)?,
            "model.patch_size" => m.patch_size = parse(key, value)?,
            "model.enc_depth" => m.enc_depth = parse(key, value)?,
            "model.enc_width" => m.enc_width = parse(key, value)?,
            "model.enc_heads" => m.enc_heads = parse(key, value)?,
            "model.dec_depth" => m.dec_depth = parse(key, value)?,
            "model.dec_width" => m.dec_width = parse(key, value)?,
            "model.dec_heads" => m.dec_heads = parse(key, value)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "model.num_aus" => m.num_aus = parse(key, value)?,
            "model.mask_ratio" => m.mask_ratio = parse(key, value)?,
            "model.norm_pix_target" => m.norm_pix_target = parse_bool(key, value)?,
            "task" => t.task = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "min_lr" => t.min_lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "accum_steps" => t.accum_steps = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "drop_path_rate" => t.drop_path_rate = parse(key, value)?,
            "mixup_alpha" => t.mixup_alpha = parse(key, value)?,
            "cutmix_alpha" => t.cutmix_alpha = parse(key, value)?,
            "mix_switch_prob" => t.mix_switch_prob = parse(key, value)?,
            "randaug_magnitude" => t.randaug_magnitude = parse(key, value)?,
            "randaug_prob" => t.randaug_prob = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "reduction" => t.reduction = parse(key, value)?,
            "loss" => t.loss = parse(key, value)?,
            "crop_scale_min" => t.crop_scale_min = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "freeze_encoder" => t.freeze_encoder = parse_bool(key, value)?,
            "max_steps" => t.max_steps = if value == "none" { None } else { Some(parse(key, value)?) },
            k if k.starts_with("run.") => {
                self.run.insert(k[4..].to_string(), value.to_string());
            }
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Parses a config file on top of `self` (which supplies defaults).
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate()?;
        self.model_config().validate().map_err(|e| e.to_string())
    }

    /// Complete snapshot: every key with its resolved value.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = format!("schema = {SCHEMA_VERSION}\n");
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("task", t.task.to_string());
        kv("model.image_size", m.image_size.to_string());
        kv("model.channels", m.channels.to_string());
        kv("model.patch_size", m.patch_size.to_string());
        kv("model.enc_depth", m.enc_depth.to_string());
        kv("model.enc_width", m.enc_width.to_string());
        kv("model.enc_heads", m.enc_heads.to_string());
        kv("model.dec_depth", m.dec_depth.to_string());
        kv("model.dec_width", m.dec_width.to_string());
        kv("model.dec_heads", m.dec_heads.to_string());
        kv("model.mlp_ratio", m.mlp_ratio.to_string());
        kv("model.num_aus", m.num_aus.to_string());
        kv("model.mask_ratio", m.mask_ratio.to_string());
        kv("model.norm_pix_target", m.norm_pix_target.to_string());
        kv("epochs", t.epochs.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("base_lr", t.base_lr.to_string());
        kv("min_lr", t.min_lr.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("accum_steps", t.accum_steps.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("seed", t.seed.to_string());
        kv("drop_path_rate", t.drop_path_rate.to_string());
        kv("mixup_alpha", t.mixup_alpha.to_string());
        kv("cutmix_alpha", t.cutmix_alpha.to_string());
        kv("mix_switch_prob", t.mix_switch_prob.to_string());
        kv("randaug_magnitude", t.randaug_magnitude.to_string());
        kv("randaug_prob", t.randaug_prob.to_string());
        kv("label_smoothing", t.label_smoothing.to_string());
        kv("reduction", t.reduction.to_string());
        kv("loss", t.loss.to_string());
        kv("crop_scale_min", t.crop_scale_min.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("freeze_encoder", t.freeze_encoder.to_string());
        kv("max_steps", t.max_steps.map_or("none".into(), |v| v.to_string()));
        for (k, v) in &self.run {
            kv(&format!("run.{k}"), v.clone());
        }
        s
    }
}
