//! The `maeface` command line.
//!
//! Every command writes `run.cfg` into its output directory before doing any
//! work. The file holds the fully resolved settings; `maeface replay run.cfg`
//! re-executes the command from it.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 data error,
//! 4 numerical failure, 1 anything else.

mod data_cmds;
mod reconstruct;
mod train_cmds;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

pub use reconstruct::{mask_census, triptych, Triptych, MASK_GRAY};
pub use train_cmds::{
    ablation_csv, init_weights, AblationRow, InitSpec, ABLATION_GRID, EVALS_FILE, FINAL_CHECKPOINT, STATE_CHECKPOINT,
    STATE_OPTIM, TRACE_FILE,
};

use crate::data::{read_manifest, DataError, Manifest};
use crate::metrics::MetricsError;
use crate::ndgrad::GradError;
use crate::train::{ConfigError, PaperDataset, RunConfig, TrainConfig, TrainError, SCHEMA_VERSION};
use crate::vitmae::checkpoint::write_atomic;
use crate::vitmae::{CheckpointError, ModelConfig, ModelError, Task};

pub const SNAPSHOT_FILE: &str = "run.cfg";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Grad(g) => g.into(),
            ModelError::Config(_) | ModelError::TaskMismatch { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<GradError> for CliError {
    fn from(e: GradError) -> Self {
        match e {
            GradError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Labels(_) => CliError::Usage(e.to_string()),
            TrainError::EmptyDataset | TrainError::Io { .. } | TrainError::State(_) => CliError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Grad(g) => g.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::Loss(l) => CliError::Usage(l.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "maeface", version, about = "Masked-autoencoder face pre-training and action-unit fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled face corpus.
    Synth(data_cmds::SynthArgs),
    /// Keep every N-th frame of each subject.
    Subsample(data_cmds::SubsampleArgs),
    /// Drop unusable images, then eye-align, crop and resize the rest.
    Align(data_cmds::AlignArgs),
    /// Subject-exclusive k-fold assignment.
    Kfold(data_cmds::KfoldArgs),
    /// AU label statistics: per-AU rates and the combination histogram.
    Stats(data_cmds::StatsArgs),
    /// Masked-autoencoder pre-training.
    Pretrain(train_cmds::PretrainArgs),
    /// AU detection or intensity fine-tuning.
    Finetune(train_cmds::FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint.
    Eval(train_cmds::EvalArgs),
    /// Render masked | reconstruction | original triptychs.
    Reconstruct(reconstruct::ReconstructArgs),
    /// Pre-training loss ablation: {L2, L1} x {without, with} patch normalization.
    AblateLoss(train_cmds::AblateArgs),
    /// Re-run a command from its run.cfg snapshot.
    Replay(ReplayArgs),
}

/// Settings shared by the training commands.
#[derive(Args, Debug, Clone)]
pub struct RunOpts {
    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Run config file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings applied before the config file.
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
    PaperBp4d,
    PaperBp4dPlus,
    PaperDisfa,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "desk" => Preset::Desk,
            "paper" => Preset::Paper,
            "paper-bp4d" => Preset::PaperBp4d,
            "paper-bp4dplus" => Preset::PaperBp4dPlus,
            "paper-disfa" => Preset::PaperDisfa,
            _ => return Err(format!("unknown preset {s:?} (desk, paper, paper-bp4d, paper-bp4dplus, paper-disfa)")),
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
            Preset::PaperBp4d => "paper-bp4d",
            Preset::PaperBp4dPlus => "paper-bp4dplus",
            Preset::PaperDisfa => "paper-disfa",
        })
    }
}

impl RunOpts {
    /// Preset, then config file, then `--set`, then the seed flag.
    pub fn resolve(&self, task: Task) -> Result<RunConfig, CliError> {
        let train = match (self.preset, task) {
            (Preset::Desk, Task::Pretrain) => TrainConfig::pretrain_desk(),
            (Preset::Desk, t) => TrainConfig::finetune_desk(t),
            (Preset::Paper, Task::Pretrain) => TrainConfig::pretrain_paper(),
            (p, Task::Pretrain) => return Err(CliError::Usage(format!("preset {p} is a fine-tuning preset"))),
            (Preset::Paper, _) => {
                return Err(CliError::Usage(
                    "fine-tuning needs a dataset preset: paper-bp4d, paper-bp4dplus or paper-disfa".into(),
                ))
            }
            (p, t) => {
                let ds = match p {
                    Preset::PaperBp4d => PaperDataset::Bp4d,
                    Preset::PaperBp4dPlus => PaperDataset::Bp4dPlus,
                    _ => PaperDataset::Disfa,
                };
                TrainConfig::finetune_paper(t, ds).map_err(CliError::Usage)?
            }
        };
        let model = if self.preset == Preset::Desk { ModelConfig::desk() } else { ModelConfig::paper_base() };
        let mut rc = RunConfig::new(model, train);
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            rc.apply_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            rc.set(k.trim(), v.trim()).map_err(|e| CliError::Usage(format!("--set {kv}: {e}")))?;
        }
        if rc.train.task != task {
            return Err(CliError::Usage(format!("config sets task {} but the command runs {task}", rc.train.task)));
        }
        rc.train.seed = self.seed;
        // run.* keys describe the command line and are rebuilt by each command
        rc.run.clear();
        Ok(rc)
    }
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// A run.cfg written by an earlier command.
    pub snapshot: PathBuf,
    /// Output directory (defaults to the recorded one).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Recorded command line of a run: `(flag, value)` pairs without `--out`, `--config` or `--set`.
pub(crate) type Flags = Vec<(&'static str, String)>;

/// Writes `out/run.cfg` atomically.
pub(crate) fn write_snapshot(
    out: &Path,
    command: &str,
    flags: &Flags,
    config: Option<&RunConfig>,
) -> Result<(), CliError> {
    let mut text = match config {
        Some(rc) => {
            let mut rc = rc.clone();
            rc.run = BTreeMap::new();
            rc.to_text()
        }
        None => format!("schema = {SCHEMA_VERSION}\n"),
    };
    text.push_str(&format!("run.command = {command}\n"));
    text.push_str(&format!("run.out = {}\n", out.display()));
    for (k, v) in flags {
        text.push_str(&format!("run.{k} = {v}\n"));
    }
    let path = out.join(SNAPSHOT_FILE);
    write_atomic(&path, text.as_bytes()).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Creates the output directory (and parents) if needed.
pub(crate) fn prepare_out(out: &Path) -> Result<(), CliError> {
    if out.is_file() {
        return Err(CliError::Usage(format!("output path {} is a file, expected a directory", out.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Reads a manifest; a path that does not exist is a usage error.
pub(crate) fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "manifest not found: {} (create one with `maeface synth --seed N --count N --out DIR`)",
            path.display()
        )));
    }
    Ok(read_manifest(path)?)
}

/// Copy of `manifest` whose image paths resolve from anywhere.
pub(crate) fn absolute_images(manifest: &Manifest, manifest_path: &Path) -> Result<Manifest, CliError> {
    let mut m = manifest.clone();
    for r in &mut m.records {
        let p = crate::data::image_path(manifest_path, r);
        let abs = std::path::absolute(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        r.image = abs.to_string_lossy().into_owned();
    }
    Ok(m)
}

fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.snapshot)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", args.snapshot.display())))?;
    let mut run = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if let Some(k) = k.trim().strip_prefix("run.") {
                run.insert(k.to_string(), v.trim().to_string());
            }
        }
    }
    let command = run.remove("command").ok_or_else(|| CliError::Usage("snapshot has no run.command".into()))?;
    let recorded_out = run.remove("out").ok_or_else(|| CliError::Usage("snapshot has no run.out".into()))?;
    let out = args.out.unwrap_or_else(|| PathBuf::from(recorded_out));
    let mut argv = vec!["maeface".to_string(), command.clone(), "--out".into(), out.display().to_string()];
    if matches!(command.as_str(), "pretrain" | "finetune" | "ablate-loss") {
        argv.push("--config".into());
        argv.push(args.snapshot.display().to_string());
    }
    for (k, v) in run {
        argv.push(format!("--{k}"));
        argv.push(v);
    }
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(format!("snapshot does not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Usage("a snapshot cannot replay another snapshot".into()));
    }
    dispatch(cli)
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => data_cmds::synth(a),
        Command::Subsample(a) => data_cmds::subsample(a),
        Command::Align(a) => data_cmds::align(a),
        Command::Kfold(a) => data_cmds::kfold(a),
        Command::Stats(a) => data_cmds::stats(a),
        Command::Pretrain(a) => train_cmds::pretrain(a),
        Command::Finetune(a) => train_cmds::finetune(a),
        Command::Eval(a) => train_cmds::eval(a),
        Command::Reconstruct(a) => reconstruct::reconstruct(a),
        Command::AblateLoss(a) => train_cmds::ablate_loss(a),
        Command::Replay(a) => replay(a),
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
