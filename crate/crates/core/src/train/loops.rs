//! Pre-training and fine-tuning loops.
//!
//! One optimizer step consumes `batch_size · accum_steps` samples. Each
//! micro-batch of `batch_size` samples gets its own tape; gradients are summed
//! across micro-batches in a fixed order before the update. Every random draw
//! comes from a stream keyed on `(seed, step, slot)`, so a run resumed from a
//! saved state continues exactly as the uninterrupted run would have.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::losses::{loss_detection, loss_intensity, loss_pretrain, patch_normalize, AULabels, PretrainTargets};
use crate::losses::{denormalize_intensity, PATCH_NORM_EPS};
use crate::metrics::{detection_report, intensity_report, MetricsReport, DEFAULT_THRESHOLD};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::{stream, Concern};
use crate::vitmae::{
    classify, decode, encode, BoundParams, patchify, sample_mask, used_by_task, Group, MaskPlan, ModelWeights, ParamSpec, Task,
};

use super::augment::{augment_batch, randaug_light, random_resized_crop, MixConfig, Mode};
use super::config::TrainConfig;
use super::optim::{adamw_step, AdamW, OptimState};
use super::schedule::{lr_at, steps_per_epoch};
use super::{DropPath, TrainError};

/// One labeled face, already at model resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, S, S]` in [0, 1].
    pub image: Tensor<f32>,
    pub occurrence: Option<Vec<u8>>,
    pub intensity: Option<Vec<u8>>,
}

impl Sample {
    /// Model input and labels for one manifest record.
    pub fn from_record(
        image: &crate::data::Image,
        record: &crate::data::SampleRecord,
        size: usize,
        channels: usize,
    ) -> Result<Self, crate::data::DataError> {
        Ok(Self {
            image: crate::data::to_model_input(image, size, channels)?,
            occurrence: record.occurrence_bits(),
            intensity: record.intensity.clone(),
        })
    }
}

/// Pairs each record with its image.
pub fn samples_from(
    manifest: &crate::data::Manifest,
    images: &[crate::data::Image],
    size: usize,
    channels: usize,
) -> Result<Vec<Sample>, crate::data::DataError> {
    manifest.records.iter().zip(images).map(|(r, img)| Sample::from_record(img, r, size, channels)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,loss";

    pub fn to_csv(&self) -> String {
        format!("{},{},{:e},{:.9}", self.step, self.epoch, self.lr, self.loss)
    }
}

/// Hooks called from inside a loop. Errors abort the run.
pub trait Observer {
    fn on_step(&mut self, _row: &TraceRow) -> Result<(), TrainError> {
        Ok(())
    }

    /// Called every `checkpoint_every` steps and after the last step.
    fn on_checkpoint(&mut self, _weights: &ModelWeights, _optim: &OptimState) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_eval(&mut self, _epoch: usize, _report: &MetricsReport) -> Result<(), TrainError> {
        Ok(())
    }

    /// Checked after each step; `true` ends the run there (final checkpoint hook still fires).
    fn should_stop(&mut self, _row: &TraceRow) -> bool {
        false
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl Observer for Silent {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub optim: OptimState,
    pub trace: Vec<TraceRow>,
    /// `(epoch, report)` for every evaluation pass.
    pub evals: Vec<(usize, MetricsReport)>,
}

/// Step counts implied by a config and dataset size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepPlan {
    pub steps_per_epoch: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Where the loop stops (`total_steps` unless `max_steps` cuts it short).
    pub stop: usize,
}

impl StepPlan {
    pub fn new(cfg: &TrainConfig, n: usize) -> Self {
        let spe = steps_per_epoch(n, cfg.effective_batch());
        let total = spe * cfg.epochs;
        Self {
            steps_per_epoch: spe,
            warmup_steps: spe * cfg.warmup_epochs,
            total_steps: total,
            stop: cfg.max_steps.map_or(total, |m| m.min(total)),
        }
    }

    pub fn lr(&self, cfg: &TrainConfig, step: usize) -> f64 {
        lr_at(step, cfg.peak_lr(), cfg.min_lr, self.warmup_steps, self.total_steps)
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Concern::Shuffle, epoch as u64, 0));
    order
}

/// Sample indices consumed by optimizer step `step`.
pub fn batch_indices(cfg: &TrainConfig, n: usize, step: usize) -> Vec<usize> {
    let plan = StepPlan::new(cfg, n);
    let (epoch, pos) = (step / plan.steps_per_epoch, step % plan.steps_per_epoch);
    let b = cfg.effective_batch();
    epoch_order(cfg.seed, epoch, n)[pos * b..((pos + 1) * b).min(n)].to_vec()
}

/// Hex SHA-256 of the sample order for every step of a run.
///
/// Two configs with equal hashes feed identical batches in identical order.
pub fn data_order_hash(cfg: &TrainConfig, n: usize) -> String {
    let plan = StepPlan::new(cfg, n);
    let mut h = Sha256::new();
    let mut epoch = usize::MAX;
    let mut order = Vec::new();
    let b = cfg.effective_batch();
    for step in 0..plan.stop {
        let e = step / plan.steps_per_epoch;
        if e != epoch {
            epoch = e;
            order = epoch_order(cfg.seed, e, n);
        }
        let pos = step % plan.steps_per_epoch;
        for &i in &order[pos * b..((pos + 1) * b).min(n)] {
            h.update((i as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

fn trainable_filter(task: Task, freeze_encoder: bool) -> impl Fn(&ParamSpec) -> bool {
    move |s| used_by_task(task, s.group) && !(freeze_encoder && s.group == Group::Encoder)
}

fn drop_path_for(cfg: &TrainConfig, step: usize, slot: usize) -> Result<Option<DropPath>, TrainError> {
    if cfg.drop_path_rate == 0.0 {
        return Ok(None);
    }
    let rng = stream(cfg.seed, Concern::DropPath, step as u64, slot as u64);
    Ok(Some(DropPath::new(cfg.drop_path_rate, rng).map_err(TrainError::Config)?))
}

fn check_setup(cfg: &TrainConfig, weights: &ModelWeights, n: usize) -> Result<(), TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if weights.config.task != cfg.task {
        return Err(TrainError::Config(format!(
            "model was built for task {} but the run is configured for {}",
            weights.config.task, cfg.task
        )));
    }
    Ok(())
}

/// Records the loss of batch slot `slot` on a tape.
type SampleLoss<'a> =
    Box<dyn Fn(&mut Tape, &BoundParams, usize, &mut Option<DropPath>) -> Result<Var, TrainError> + 'a>;

/// Shared driver; `prepare` builds the per-slot loss closure for one step.
fn run_steps<'a>(
    cfg: &TrainConfig,
    mut weights: ModelWeights,
    optim: Option<OptimState>,
    n: usize,
    obs: &mut dyn Observer,
    mut prepare: impl FnMut(usize, &[usize]) -> Result<SampleLoss<'a>, TrainError>,
    mut after_epoch: impl FnMut(usize, bool, &ModelWeights, &mut Vec<(usize, MetricsReport)>, &mut dyn Observer) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    check_setup(cfg, &weights, n)?;
    let mut optim = optim.unwrap_or_else(|| OptimState::new(&weights));
    optim.check_against(&weights)?;
    let plan = StepPlan::new(cfg, n);
    let hp = AdamW { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay };
    let filter = trainable_filter(cfg.task, cfg.freeze_encoder);
    let mut trace = Vec::new();
    let mut evals = Vec::new();
    let start = optim.step as usize;
    for step in start..plan.stop {
        let epoch = step / plan.steps_per_epoch;
        let idx = batch_indices(cfg, n, step);
        let weight = cfg.reduction.batch_weight(idx.len()) as f32;
        let sample_loss = prepare(step, &idx)?;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; weights.params.refs().len()];
        let mut loss = 0.0f64;
        for (chunk_no, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let vars = weights.bind(&mut tape, &filter);
            let mut total: Option<Var> = None;
            for j in 0..chunk.len() {
                let slot = chunk_no * cfg.batch_size + j;
                let mut drop = drop_path_for(cfg, step, slot)?;
                let l = sample_loss(&mut tape, &vars, slot, &mut drop)?;
                let lw = tape.scale(l, weight)?;
                loss += tape.scalar_value(lw) as f64;
                total = Some(match total {
                    None => lw,
                    Some(t) => tape.add(t, lw)?,
                });
            }
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step, what: "loss".into() });
            }
            tape.backward(total.expect("non-empty chunk"))?;
            for (slot, v) in grads.iter_mut().zip(vars.refs()) {
                if let Some(g) = tape.grad(*v) {
                    match slot {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g.to_vec()),
                    }
                }
            }
        }
        let lr = plan.lr(cfg, step);
        adamw_step(&mut weights, &grads, &mut optim, lr, &hp)?;
        let row = TraceRow { step, epoch, lr, loss };
        obs.on_step(&row)?;
        trace.push(row);
        let done = step + 1 == plan.stop || obs.should_stop(&row);
        if done || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            obs.on_checkpoint(&weights, &optim)?;
        }
        if (step + 1) % plan.steps_per_epoch == 0 || done {
            after_epoch(epoch, done, &weights, &mut evals, obs)?;
        }
        if done {
            break;
        }
    }
    Ok(TrainOutcome { weights, optim, trace, evals })
}

/// Masked-autoencoder pre-training on unlabeled images.
///
/// Pass `optim` from a saved state (with the matching weights) to resume.
pub fn pretrain(
    cfg: &TrainConfig,
    weights: ModelWeights,
    optim: Option<OptimState>,
    images: &[Tensor<f32>],
    obs: &mut dyn Observer,
) -> Result<TrainOutcome, TrainError> {
    if cfg.task != Task::Pretrain {
        return Err(TrainError::Config(format!("pretrain called with task {}", cfg.task)));
    }
    let mcfg = weights.config.clone();
    let norm = mcfg.norm_pix_target;
    run_steps(
        cfg,
        weights,
        optim,
        images.len(),
        obs,
        |step, idx| {
            let mut items = Vec::with_capacity(idx.len());
            for (slot, &i) in idx.iter().enumerate() {
                let mut aug = stream(cfg.seed, Concern::Augment, step as u64, slot as u64);
                let img = random_resized_crop(&images[i], cfg.crop_scale_min, &mut aug);
                let patches = patchify(&img, mcfg.patch_size)?;
                let targets = if norm { patch_normalize(&patches, PATCH_NORM_EPS) } else { PretrainTargets::raw(patches.clone()) };
                let mut mrng = stream(cfg.seed, Concern::Mask, step as u64, slot as u64);
                let plan = sample_mask(mcfg.num_patches(), mcfg.mask_ratio, &mut mrng)?;
                items.push((patches, targets, plan));
            }
            let mcfg = mcfg.clone();
            Ok(Box::new(move |tape: &mut Tape, vars: &BoundParams, slot: usize, drop: &mut Option<DropPath>| {
                let (patches, targets, plan) = &items[slot];
                let x = tape.constant(patches.clone());
                let z = encode(tape, &mcfg, vars, x, plan, drop.as_mut())?;
                let pred = decode(tape, &mcfg, vars, z, plan, drop.as_mut())?;
                Ok(loss_pretrain(tape, pred, targets, plan, cfg.loss, cfg.reduction)?)
            }))
        },
        |_, _, _, _, _| Ok(()),
    )
}

/// Reconstruction loss of `images` under fixed per-image masks (no dropout, no crop).
pub fn reconstruction_loss(
    weights: &ModelWeights,
    images: &[Tensor<f32>],
    plans: &[MaskPlan],
    flavor: crate::losses::LossFlavor,
) -> Result<f64, TrainError> {
    let cfg = &weights.config;
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape, |_| false);
    let mark = tape.len();
    let mut total = 0.0;
    for (img, plan) in images.iter().zip(plans) {
        let patches = patchify(img, cfg.patch_size)?;
        let targets =
            if cfg.norm_pix_target { patch_normalize(&patches, PATCH_NORM_EPS) } else { PretrainTargets::raw(patches.clone()) };
        let x = tape.constant(patches);
        let z = encode(&mut tape, cfg, &vars, x, plan, None)?;
        let pred = decode(&mut tape, cfg, &vars, z, plan, None)?;
        let l = loss_pretrain(&mut tape, pred, &targets, plan, flavor, crate::losses::Reduction::Mean)?;
        total += tape.scalar_value(l) as f64;
        tape.truncate(mark);
    }
    Ok(total / images.len().max(1) as f64)
}

fn check_labels(task: Task, samples: &[Sample], num_aus: usize) -> Result<(), TrainError> {
    for (i, s) in samples.iter().enumerate() {
        let labels = match task {
            Task::Detect => s.occurrence.as_ref(),
            Task::Intensity => s.intensity.as_ref(),
            Task::Pretrain => return Ok(()),
        };
        let Some(l) = labels else {
            let kind = if task == Task::Detect { "occurrence" } else { "intensity" };
            return Err(TrainError::Labels(format!("sample {i} has no {kind} labels, required by task {task}")));
        };
        if l.len() != num_aus {
            return Err(TrainError::Labels(format!("sample {i} has {} labels, model predicts {num_aus} AUs", l.len())));
        }
    }
    Ok(())
}

/// Evaluation data for the fine-tuning loop.
pub struct EvalSet<'a> {
    pub samples: &'a [Sample],
    pub au_names: &'a [String],
    pub dataset: &'a str,
}

/// Fine-tuning for AU detection or intensity.
///
/// With `eval`, a report is produced every `eval_every` epochs and after the
/// final epoch.
pub fn finetune(
    cfg: &TrainConfig,
    weights: ModelWeights,
    optim: Option<OptimState>,
    train: &[Sample],
    eval: Option<EvalSet<'_>>,
    obs: &mut dyn Observer,
) -> Result<TrainOutcome, TrainError> {
    if !cfg.task.is_finetune() {
        return Err(TrainError::Config(format!("finetune called with task {}", cfg.task)));
    }
    check_setup(cfg, &weights, train.len())?;
    let mcfg = weights.config.clone();
    check_labels(cfg.task, train, mcfg.num_aus)?;
    if let Some(e) = &eval {
        check_labels(cfg.task, e.samples, mcfg.num_aus)?;
    }
    let mix = MixConfig { mixup_alpha: cfg.mixup_alpha, cutmix_alpha: cfg.cutmix_alpha, switch_prob: cfg.mix_switch_prob };
    let eps = cfg.label_smoothing;
    let task = cfg.task;
    run_steps(
        cfg,
        weights,
        optim,
        train.len(),
        obs,
        |step, idx| {
            let mut images = Vec::with_capacity(idx.len());
            let mut soft = Vec::with_capacity(idx.len());
            for (slot, &i) in idx.iter().enumerate() {
                let mut aug = stream(cfg.seed, Concern::Augment, step as u64, slot as u64);
                images.push(randaug_light(&train[i].image, cfg.randaug_magnitude, cfg.randaug_prob, &mut aug));
                if task == Task::Detect {
                    let occ = train[i].occurrence.as_ref().expect("checked");
                    soft.push(occ.iter().map(|&b| b as f64 * (1.0 - eps) + eps / 2.0).collect::<Vec<f64>>());
                }
            }
            if task == Task::Detect {
                let mut rng = stream(cfg.seed, Concern::Mixup, step as u64, 0);
                (images, soft) = augment_batch(images, soft, &mix, Mode::Train, &mut rng);
            }
            let mut items = Vec::with_capacity(idx.len());
            for (slot, img) in images.iter().enumerate() {
                let labels = match task {
                    Task::Detect => AULabels { occurrence: Some(soft[slot].clone()), intensity: None, valid: vec![true; mcfg.num_aus] },
                    _ => AULabels::from_intensity(train[idx[slot]].intensity.as_ref().expect("checked"))?,
                };
                items.push((patchify(img, mcfg.patch_size)?, labels));
            }
            let mcfg = mcfg.clone();
            Ok(Box::new(move |tape: &mut Tape, vars: &BoundParams, slot: usize, drop: &mut Option<DropPath>| {
                let (patches, labels) = &items[slot];
                let x = tape.constant(patches.clone());
                let out = classify(tape, &mcfg, vars, x, drop.as_mut())?;
                Ok(match task {
                    Task::Detect => loss_detection(tape, out, labels)?,
                    _ => {
                        let p = tape.sigmoid(out)?;
                        loss_intensity(tape, p, labels)?
                    }
                })
            }))
        },
        |epoch, last, weights, evals, obs| {
            let Some(e) = &eval else { return Ok(()) };
            let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
            if last || due {
                let report = evaluate(weights, e, DEFAULT_THRESHOLD)?;
                obs.on_eval(epoch, &report)?;
                evals.push((epoch, report));
            }
            Ok(())
        },
    )
}

/// Per-sample outputs: detection probabilities, or intensities on the 0–5 scale.
pub fn predict(weights: &ModelWeights, images: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>, TrainError> {
    let cfg = &weights.config;
    if !cfg.task.is_finetune() {
        return Err(TrainError::Config(format!("cannot predict AUs with a {} model", cfg.task)));
    }
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape, |_| false);
    let mark = tape.len();
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let x = tape.constant(patchify(img, cfg.patch_size)?);
        let logits = classify(&mut tape, cfg, &vars, x, None)?;
        let p = tape.sigmoid(logits)?;
        let v = tape.value(p);
        out.push(match cfg.task {
            Task::Detect => v.iter().map(|&x| x as f64).collect(),
            _ => denormalize_intensity(v).into_iter().map(|x| x as f64).collect(),
        });
        tape.truncate(mark);
    }
    Ok(out)
}

/// Metrics of `weights` on an evaluation set.
pub fn evaluate(weights: &ModelWeights, set: &EvalSet<'_>, threshold: f64) -> Result<MetricsReport, TrainError> {
    let task = weights.config.task;
    check_labels(task, set.samples, weights.config.num_aus)?;
    let images: Vec<Tensor<f32>> = set.samples.iter().map(|s| s.image.clone()).collect();
    let pred = predict(weights, &images)?;
    let mut report = match task {
        Task::Detect => {
            let gt: Vec<Vec<u8>> = set.samples.iter().map(|s| s.occurrence.clone().expect("checked")).collect();
            detection_report(&pred, &gt, set.au_names, threshold)?
        }
        _ => {
            let gt: Vec<Vec<u8>> = set.samples.iter().map(|s| s.intensity.clone().expect("checked")).collect();
            intensity_report(&pred, &gt, set.au_names)?
        }
    };
    report.dataset = set.dataset.to_string();
    Ok(report)
}
