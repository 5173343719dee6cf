use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;

use crate::data::{load_images, to_model_input, Manifest};
use crate::losses::LossFlavor;
use crate::metrics::{Folds, MetricsReport};
use crate::ndgrad::Tensor;
use crate::rng::{stream, Concern};
use crate::train::{
    self, data_order_hash, partial_protocol, samples_from, EvalSet, Observer, OptimState, RunConfig, Sample, TraceRow,
    TrainError,
};
use crate::vitmae::{load_encoder, load_weights, save_weights, ModelWeights, Task};

use super::{load_manifest, prepare_out, write_file, write_snapshot, CliError, Flags, RunOpts};

pub const TRACE_FILE: &str = "trace.csv";
pub const EVALS_FILE: &str = "evals.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const STATE_CHECKPOINT: &str = "state.ckpt";
pub const STATE_OPTIM: &str = "state.optim";

/// Writes the trace, periodic state and evaluation rows of one run.
struct RunFiles {
    out: PathBuf,
    trace: File,
    evals: Option<File>,
    log_every: usize,
}

impl RunFiles {
    /// Opens `trace.csv`, keeping only rows before `resume_step` from an earlier run.
    fn open(out: &Path, resume_step: usize) -> Result<Self, CliError> {
        let path = out.join(TRACE_FILE);
        let mut text = format!("{}\n", TraceRow::CSV_HEADER);
        if resume_step > 0 {
            if let Ok(old) = std::fs::read_to_string(&path) {
                for line in old.lines().skip(1) {
                    let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                    if step.is_some_and(|s| s < resume_step) {
                        text.push_str(line);
                        text.push('\n');
                    }
                }
            }
        }
        write_file(&path, text.as_bytes())?;
        let trace = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self { out: out.to_path_buf(), trace, evals: None, log_every: 50 })
    }
}

impl Observer for RunFiles {
    fn on_step(&mut self, row: &TraceRow) -> Result<(), TrainError> {
        let path = self.out.join(TRACE_FILE);
        writeln!(self.trace, "{}", row.to_csv()).map_err(|e| TrainError::Io { path, source: e })?;
        if row.step % self.log_every == 0 {
            eprintln!("step {:>6}  epoch {:>4}  lr {:.3e}  loss {:.5}", row.step, row.epoch, row.lr, row.loss);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, weights: &ModelWeights, optim: &OptimState) -> Result<(), TrainError> {
        save_weights(weights, &self.out.join(STATE_CHECKPOINT))?;
        optim.save(&self.out.join(STATE_OPTIM))
    }

    fn on_eval(&mut self, epoch: usize, report: &MetricsReport) -> Result<(), TrainError> {
        let path = self.out.join(EVALS_FILE);
        let io = |e| TrainError::Io { path: path.clone(), source: e };
        if self.evals.is_none() {
            let mut f = File::create(&path).map_err(io)?;
            let names: Vec<&str> = report.columns.iter().map(|c| c.name.as_str()).collect();
            writeln!(f, "epoch,{}", names.join(",")).map_err(io)?;
            self.evals = Some(f);
        }
        let vals: Vec<String> =
            report.columns.iter().map(|c| c.average().map_or("null".into(), |v| format!("{v:.6}"))).collect();
        writeln!(self.evals.as_mut().unwrap(), "{epoch},{}", vals.join(",")).map_err(io)?;
        eprintln!("eval after epoch {epoch}: {}", report.columns.iter().map(|c| {
            format!("{} {}", c.name, c.average().map_or("null".into(), |v| format!("{v:.4}")))
        }).collect::<Vec<_>>().join(", "));
        Ok(())
    }
}

fn load_tensors(manifest: &Manifest, path: &Path, rc: &RunConfig) -> Result<Vec<Tensor<f32>>, CliError> {
    let m = &rc.model;
    load_images(manifest, path)?
        .iter()
        .map(|img| Ok(to_model_input(img, m.image_size, m.channels)?))
        .collect()
}

fn load_samples(manifest: &Manifest, path: &Path, rc: &RunConfig) -> Result<Vec<Sample>, CliError> {
    let images = load_images(manifest, path)?;
    Ok(samples_from(manifest, &images, rc.model.image_size, rc.model.channels)?)
}

/// Weights and optimizer state saved by an earlier run (`x.ckpt` + `x.optim`).
fn load_state(path: &Path, rc: &RunConfig) -> Result<(ModelWeights, OptimState), CliError> {
    let weights = load_weights(path)?;
    if weights.config != rc.model_config() {
        return Err(CliError::Usage(format!("{} was trained with a different model config", path.display())));
    }
    let optim = OptimState::load(&path.with_extension("optim"))?;
    optim.check_against(&weights)?;
    Ok((weights, optim))
}

fn run_flags(run: &RunOpts) -> Flags {
    vec![("seed", run.seed.to_string())]
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Manifest of (unlabeled) face images.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Continue from a saved state (`state.ckpt`, with `state.optim` beside it).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunOpts,
}

pub fn pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&a.manifest)?;
    let rc = a.run.resolve(Task::Pretrain)?;
    rc.validate().map_err(CliError::Usage)?;
    prepare_out(&a.run.out)?;
    let mut flags = run_flags(&a.run);
    flags.push(("manifest", a.manifest.display().to_string()));
    if let Some(r) = &a.resume {
        flags.push(("resume", r.display().to_string()));
    }
    write_snapshot(&a.run.out, "pretrain", &flags, Some(&rc))?;

    let images = load_tensors(&manifest, &a.manifest, &rc)?;
    let (weights, optim) = match &a.resume {
        Some(p) => {
            let (w, o) = load_state(p, &rc)?;
            (w, Some(o))
        }
        None => (ModelWeights::init(&rc.model_config(), &mut stream(rc.train.seed, Concern::Init, 0, 0))?, None),
    };
    let start = optim.as_ref().map_or(0, |o| o.step as usize);
    eprintln!(
        "pretrain: {} images, {} parameters, data order {}",
        images.len(),
        weights.num_parameters(),
        &data_order_hash(&rc.train, images.len())[..16]
    );
    let mut files = RunFiles::open(&a.run.out, start)?;
    let out = train::pretrain(&rc.train, weights, optim, &images, &mut files)?;
    save_weights(&out.weights, &a.run.out.join(FINAL_CHECKPOINT))?;
    if let Some(last) = out.trace.last() {
        println!("pretrain finished at step {} with loss {:.6}", last.step, last.loss);
    }
    Ok(())
}

/// Where fine-tuning weights start.
#[derive(Clone, Debug, PartialEq)]
pub enum InitSpec {
    Scratch,
    Checkpoint(PathBuf),
}

impl FromStr for InitSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scratch" => Ok(InitSpec::Scratch),
            _ => match s.strip_prefix("checkpoint:") {
                Some(p) if !p.is_empty() => Ok(InitSpec::Checkpoint(PathBuf::from(p))),
                _ => Err(format!("expected scratch or checkpoint:<path>, got {s:?}")),
            },
        }
    }
}

impl fmt::Display for InitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitSpec::Scratch => f.write_str("scratch"),
            InitSpec::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
        }
    }
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// detect or intensity.
    #[arg(long)]
    pub task: Task,
    /// Labeled training manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// scratch, or checkpoint:<path> to start from a pre-trained encoder.
    #[arg(long, default_value = "scratch")]
    pub init: InitSpec,
    /// Train on a fraction of the labels (0.1, 0.01, 0.005, 0.002 or 0.001).
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Hold out this subject-exclusive fold for evaluation.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Fold file from `maeface kfold` (otherwise folds are drawn with --k and the seed).
    #[arg(long, requires = "fold")]
    pub folds: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Separate evaluation manifest.
    #[arg(long, conflicts_with = "fold")]
    pub test_manifest: Option<PathBuf>,
    /// Detection threshold on sigmoid probabilities.
    #[arg(long, default_value_t = crate::metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Continue from a saved state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunOpts,
}

fn check_task_labels(task: Task, m: &Manifest, what: &str) -> Result<(), CliError> {
    let ok = match task {
        Task::Detect => m.has_occurrence(),
        Task::Intensity => m.has_intensity(),
        Task::Pretrain => true,
    };
    if ok {
        Ok(())
    } else {
        let kind = if task == Task::Detect { "occurrence" } else { "intensity" };
        Err(CliError::Usage(format!("task {task} needs {kind} labels on every record of the {what} manifest")))
    }
}

/// Fine-tuning weights: fresh, or fresh with the encoder from a checkpoint.
pub fn init_weights(init: &InitSpec, rc: &RunConfig) -> Result<ModelWeights, CliError> {
    let cfg = rc.model_config();
    let mut rng = stream(rc.train.seed, Concern::Init, 0, 0);
    Ok(match init {
        InitSpec::Scratch => ModelWeights::init(&cfg, &mut rng)?,
        InitSpec::Checkpoint(p) => load_encoder(p, &cfg, &mut rng)?,
    })
}

pub fn finetune(a: FinetuneArgs) -> Result<(), CliError> {
    if !a.task.is_finetune() {
        return Err(CliError::Usage("finetune --task must be detect or intensity".into()));
    }
    let full = load_manifest(&a.manifest)?;
    let mut rc = a.run.resolve(a.task)?;
    rc.model.num_aus = full.num_aus();
    check_task_labels(a.task, &full, "training")?;

    let (mut train_m, test) = match (a.fold, &a.test_manifest) {
        (Some(k), _) => {
            let folds = match &a.folds {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
                    Folds::from_csv(&text)?
                }
                None => crate::metrics::kfold_by_subject(&full, a.k, rc.train.seed)?,
            };
            let (tr, te) = folds.split(&full, k)?;
            (tr, Some((te, a.manifest.clone())))
        }
        (None, Some(p)) => {
            let te = load_manifest(p)?;
            if te.au_names != full.au_names {
                return Err(CliError::Usage("test manifest has different AU names".into()));
            }
            check_task_labels(a.task, &te, "test")?;
            (full.clone(), Some((te, p.clone())))
        }
        (None, None) => (full.clone(), None),
    };
    if let Some(f) = a.fraction {
        let before = train_m.len();
        let (sub, cfg) = partial_protocol(&train_m, f, &rc.train)?;
        let n = (1.0 / f).round() as usize;
        eprintln!(
            "label fraction {f}: every-{n}th frame per subject ({} of {before} records), {} epochs",
            sub.len(),
            cfg.epochs
        );
        train_m = sub;
        rc.train = cfg;
    }
    rc.validate().map_err(CliError::Usage)?;
    prepare_out(&a.run.out)?;
    let mut flags = run_flags(&a.run);
    flags.push(("task", a.task.to_string()));
    flags.push(("manifest", a.manifest.display().to_string()));
    flags.push(("init", a.init.to_string()));
    flags.push(("k", a.k.to_string()));
    flags.push(("threshold", a.threshold.to_string()));
    if let Some(k) = a.fold {
        flags.push(("fold", k.to_string()));
    }
    if let Some(p) = &a.folds {
        flags.push(("folds", p.display().to_string()));
    }
    if let Some(p) = &a.test_manifest {
        flags.push(("test-manifest", p.display().to_string()));
    }
    if let Some(r) = &a.resume {
        flags.push(("resume", r.display().to_string()));
    }
    // the snapshot already carries the adjusted epoch count, so --fraction is not replayed
    write_snapshot(&a.run.out, "finetune", &flags, Some(&rc))?;

    let train_samples = load_samples(&train_m, &a.manifest, &rc)?;
    let test_samples = match &test {
        Some((m, p)) => Some(load_samples(m, p, &rc)?),
        None => None,
    };
    let (weights, optim) = match &a.resume {
        Some(p) => {
            let (w, o) = load_state(p, &rc)?;
            (w, Some(o))
        }
        None => (init_weights(&a.init, &rc)?, None),
    };
    let start = optim.as_ref().map_or(0, |o| o.step as usize);
    eprintln!("finetune {}: {} training samples, init {}", a.task, train_samples.len(), a.init);
    let mut files = RunFiles::open(&a.run.out, start)?;
    let eval = test_samples
        .as_deref()
        .map(|s| EvalSet { samples: s, au_names: &full.au_names, dataset: &full.dataset });
    let out = train::finetune(&rc.train, weights, optim, &train_samples, eval, &mut files)?;
    save_weights(&out.weights, &a.run.out.join(FINAL_CHECKPOINT))?;
    if let Some(s) = &test_samples {
        let set = EvalSet { samples: s, au_names: &full.au_names, dataset: &full.dataset };
        let mut report = train::evaluate(&out.weights, &set, a.threshold)?;
        report.fold = a.fold;
        write_report(&a.run.out, &report)?;
    }
    Ok(())
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<(), CliError> {
    write_file(&out.join("metrics.csv"), report.to_csv().as_bytes())?;
    let table = report.to_table();
    write_file(&out.join("metrics.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Expected task; must match the checkpoint.
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&a.manifest)?;
    let weights = load_weights(&a.checkpoint)?;
    let task = weights.config.task;
    if !task.is_finetune() {
        return Err(CliError::Usage(format!("{} is a pre-training checkpoint", a.checkpoint.display())));
    }
    if let Some(t) = a.task {
        if t != task {
            return Err(CliError::Usage(format!("checkpoint was trained for {task}, --task says {t}")));
        }
    }
    if weights.config.num_aus != manifest.num_aus() {
        return Err(CliError::Usage(format!(
            "checkpoint predicts {} AUs, manifest has {}",
            weights.config.num_aus,
            manifest.num_aus()
        )));
    }
    check_task_labels(task, &manifest, "evaluation")?;
    prepare_out(&a.out)?;
    let mut flags: Flags = vec![
        ("checkpoint", a.checkpoint.display().to_string()),
        ("manifest", a.manifest.display().to_string()),
        ("threshold", a.threshold.to_string()),
    ];
    if let Some(t) = a.task {
        flags.push(("task", t.to_string()));
    }
    write_snapshot(&a.out, "eval", &flags, None)?;
    let images = load_images(&manifest, &a.manifest)?;
    let samples = samples_from(&manifest, &images, weights.config.image_size, weights.config.channels)?;
    let set = EvalSet { samples: &samples, au_names: &manifest.au_names, dataset: &manifest.dataset };
    let report = train::evaluate(&weights, &set, a.threshold)?;
    write_report(&a.out, &report)
}

/// Row order of the loss ablation: `(loss, normalized targets)`.
pub const ABLATION_GRID: [(LossFlavor, bool); 4] =
    [(LossFlavor::L2, false), (LossFlavor::L2, true), (LossFlavor::L1, false), (LossFlavor::L1, true)];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub loss: LossFlavor,
    pub norm_pix: bool,
    /// Mean training loss over the last pre-training epoch.
    pub pretrain_loss: f64,
    pub data_order: String,
    pub f1: Option<f64>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("loss,norm_pix,pretrain_loss,data_order,f1\n");
    for r in rows {
        let f1 = r.f1.map_or("null".into(), |v| format!("{v:.6}"));
        s.push_str(&format!("{},{},{:.6},{},{f1}\n", r.loss, r.norm_pix, r.pretrain_loss, r.data_order));
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<6} {:<6} {:>10} {:>8}\n", "loss", "norm", "pre-loss", "F1");
    for r in rows {
        let f1 = r.f1.map_or("null".into(), |v| format!("{:.1}", 100.0 * v));
        let norm = if r.norm_pix { "w/" } else { "w/o" };
        s.push_str(&format!("{:<6} {:<6} {:>10.4} {:>8}\n", r.loss.to_string().to_uppercase(), norm, r.pretrain_loss, f1));
    }
    s
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Pre-training images.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Labeled fine-tuning manifest.
    #[arg(long)]
    pub labeled: PathBuf,
    /// Labeled evaluation manifest.
    #[arg(long)]
    pub test_manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub ft_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub ft_lr: f64,
    #[arg(long, default_value_t = 16)]
    pub ft_batch: usize,
    #[command(flatten)]
    pub run: RunOpts,
}

pub fn ablate_loss(a: AblateArgs) -> Result<(), CliError> {
    let pre_m = load_manifest(&a.manifest)?;
    let lab_m = load_manifest(&a.labeled)?;
    let test_m = load_manifest(&a.test_manifest)?;
    check_task_labels(Task::Detect, &lab_m, "labeled")?;
    check_task_labels(Task::Detect, &test_m, "test")?;
    let rc = a.run.resolve(Task::Pretrain)?;
    rc.validate().map_err(CliError::Usage)?;
    let mut ft = rc.clone();
    ft.model.num_aus = lab_m.num_aus();
    ft.train = crate::train::TrainConfig {
        epochs: a.ft_epochs,
        warmup_epochs: (a.ft_epochs / 10).max(1).min(a.ft_epochs),
        base_lr: a.ft_lr,
        batch_size: a.ft_batch,
        seed: rc.train.seed,
        eval_every: 0,
        ..crate::train::TrainConfig::finetune_desk(Task::Detect)
    };
    ft.validate().map_err(CliError::Usage)?;
    prepare_out(&a.run.out)?;
    let mut flags = run_flags(&a.run);
    flags.push(("manifest", a.manifest.display().to_string()));
    flags.push(("labeled", a.labeled.display().to_string()));
    flags.push(("test-manifest", a.test_manifest.display().to_string()));
    flags.push(("ft-epochs", a.ft_epochs.to_string()));
    flags.push(("ft-lr", a.ft_lr.to_string()));
    flags.push(("ft-batch", a.ft_batch.to_string()));
    write_snapshot(&a.run.out, "ablate-loss", &flags, Some(&rc))?;

    let images = load_tensors(&pre_m, &a.manifest, &rc)?;
    let train_s = load_samples(&lab_m, &a.labeled, &ft)?;
    let test_s = load_samples(&test_m, &a.test_manifest, &ft)?;
    let mut rows = Vec::new();
    for (loss, norm) in ABLATION_GRID {
        let mut run = rc.clone();
        run.train.loss = loss;
        run.model.norm_pix_target = norm;
        let order = data_order_hash(&run.train, images.len());
        eprintln!("ablation {loss} {}: data order {}", if norm { "w/ norm" } else { "w/o norm" }, &order[..16]);
        let w0 = ModelWeights::init(&run.model_config(), &mut stream(run.train.seed, Concern::Init, 0, 0))?;
        let pre = train::pretrain(&run.train, w0, None, &images, &mut train::Silent)?;
        let last_epoch = pre.trace.last().map_or(0, |r| r.epoch);
        let tail: Vec<f64> = pre.trace.iter().filter(|r| r.epoch == last_epoch).map(|r| r.loss).collect();
        let pretrain_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;

        let mut start = ModelWeights::init(&ft.model_config(), &mut stream(ft.train.seed, Concern::Init, 0, 0))?;
        start.params.encoder = pre.weights.params.encoder.clone();
        let tuned = train::finetune(&ft.train, start, None, &train_s, None, &mut train::Silent)?;
        let set = EvalSet { samples: &test_s, au_names: &lab_m.au_names, dataset: &lab_m.dataset };
        let report = train::evaluate(&tuned.weights, &set, crate::metrics::DEFAULT_THRESHOLD)?;
        rows.push(AblationRow { loss, norm_pix: norm, pretrain_loss, data_order: order, f1: report.average("f1") });
    }
    write_file(&a.run.out.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    let table = ablation_table(&rows);
    write_file(&a.run.out.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
