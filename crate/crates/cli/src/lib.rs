//! `spmim` command-line tool. [`run`] parses arguments, runs one subcommand
//! and maps the outcome to an exit code: 0 success, 1 usage, 2 data or
//! configuration, 3 numerical abort.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] spmim::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(spmim::Error::NonFinite(_)) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spmim", version, about = "Sparse masked-image-modeling pretraining and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic choice.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked-image-modeling pretraining on a manifest of images.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in an existing output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Supervised fine-tuning, optionally from a pretraining checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        /// Pretraining checkpoint whose encoder initializes the classifier.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Metrics of a classifier checkpoint, or of fresh fine-tuning runs
    /// under hold-out or stratified k-fold splits.
    #[command(group(ArgGroup::new("mode").required(true).args(["checkpoint", "cv", "holdout"])))]
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Classifier checkpoint to score on the manifest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stratified k-fold cross-validation with `eval.folds` folds.
        #[arg(long)]
        cv: bool,
        /// Single hold-out split with `eval.holdout_ratio`.
        #[arg(long)]
        holdout: bool,
        /// Pretraining checkpoint for the fine-tuning runs of --cv/--holdout.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Writes original | masked | reconstructed panels for each image.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `masking.ratio`.
        #[arg(long)]
        mask_ratio: Option<f64>,
    },
    /// Grad-CAM heatmap and overlay for one image.
    Gradcam {
        #[command(flatten)]
        common: Common,
        /// Classifier checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Target class; the predicted class when omitted.
        #[arg(long)]
        class: Option<usize>,
        /// Overrides `eval.gradcam_scale`.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quality-control scores for every image of a manifest, one JSON line each.
    Qc {
        #[command(flatten)]
        common: Common,
    },
    /// Times sparse against dense encoder forward passes.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Square input side.
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Writes a synthetic labeled texture dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Prints the default configuration.
    Config,
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Diagnostics go to stderr as one line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let msg = e.to_string();
            let line: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            eprintln!("spmim: {}", line.join(" "));
            e.exit_code()
        }
    }
}
