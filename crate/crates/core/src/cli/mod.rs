//! Command-line front end: `generate`, `train`, `eval`, `segment`, and
//! `pattern`. Every command writes its outputs and one `run_manifest.json`
//! into a single run directory.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration error.

mod commands;
mod scoring;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use commands::{
    cmd_eval, cmd_generate, cmd_pattern, cmd_segment, cmd_train, load_scorer, pattern_report,
    EvalConfig, PatternRatio, PatternReport, SplitSpec, TrainRunConfig, SPLIT_FILE,
};
pub use scoring::{mean_dice, score_samples, PatternSource, ScoreOptions, ScoredSample, Scorer};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const THREADS_ENV: &str = "LLPQ_THREADS";

/// A usage or configuration problem (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for an error returned by a command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else {
        1
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "llpq",
    version,
    about = "Weakly supervised lesion proportion quantification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Generate(GenerateArgs),
    /// Train a model on a cohort.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the truth oracle) on a cohort.
    Eval(EvalArgs),
    /// Export a sample's probability map.
    Segment(SegmentArgs),
    /// Classify lesion patterns by boundary ratio.
    Pattern(PatternArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Cohort spec (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Training run config (JSON): `{"trainer": …, "split": …}`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the batch/augmentation seed and the initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the epoch count of every phase.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, required_unless_present = "resume")]
    pub out: Option<PathBuf>,
    /// Continue the run stored in this directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs (state stays resumable).
    #[arg(long)]
    pub stop_after_epochs: Option<usize>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "truth_oracle"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score samples with their planted proportion instead of a model.
    #[arg(long)]
    pub truth_oracle: bool,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Evaluation config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the bootstrap seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample directory (as written inside a cohort).
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "lesion_masks"])))]
pub struct PatternArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use the planted lesion masks instead of model segmentations.
    #[arg(long)]
    pub lesion_masks: bool,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Evaluation config (JSON); its `scoring` section applies.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance of one command invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timings_s: BTreeMap::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        write_json(&dir.join(RUN_MANIFEST_FILE), self)
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Reads a JSON config; a missing file or a schema error is a usage error.
pub(crate) fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Sizes the global thread pool from `LLPQ_THREADS` when set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        usage(format!(
            "{THREADS_ENV} must be a positive integer, got {v:?}"
        ))
    })?;
    // A pool built earlier in this process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Segment(a) => cmd_segment(&a),
        Command::Pattern(a) => cmd_pattern(&a),
    }
}
