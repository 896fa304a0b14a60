//! `icestack` command-line driver.
//!
//! Every command writes into `--out-dir` and finishes by writing
//! `manifest.json` there. Passing that manifest back as `--config` replays
//! the run with the same configuration (and, where omitted, the same
//! inputs).
//!
//! Exit codes: 0 success, 1 invalid usage, configuration or data, 2 I/O
//! failure. Log verbosity comes from `ICESTACK_LOG` (`error` .. `trace`).

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;
pub mod traces;

/// Bad arguments, configuration or input content.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const LOG_ENV: &str = "ICESTACK_LOG";

#[derive(Parser, Debug)]
#[command(
    name = "icestack",
    version,
    about = "Complete internal ice-layer thickness stacks"
)]
pub struct Cli {
    /// Run every data-parallel stage on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.base_lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset and its hidden truth.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Interpolate five gridded covariate fields onto track nodes.
    Sync {
        #[command(flatten)]
        common: Common,
        /// x,y,value CSV, one per covariate in canonical order.
        #[arg(long = "field")]
        fields: Vec<PathBuf>,
        /// lat,lon CSV of node positions.
        #[arg(long)]
        nodes: Option<PathBuf>,
    },
    /// Train a completion model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fill every missing entry using a trained checkpoint.
    Complete {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score completed stacks against observations and hidden truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        completed: Option<PathBuf>,
        /// The dataset that was completed.
        #[arg(long)]
        original: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Pretrain a deep-layer predictor on completions, fine-tune, and compare
    /// with training from scratch.
    Workflow {
        #[command(flatten)]
        common: Common,
        /// Incomplete pool to be completed for pretraining.
        #[arg(long)]
        incomplete: Option<PathBuf>,
        /// Fully traced pool for fine-tuning and scoring.
        #[arg(long)]
        complete: Option<PathBuf>,
        #[arg(long)]
        completion_checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer boundary curves of one completed sample as CSV and SVG.
    ExportTraces {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        completed: Option<PathBuf>,
        /// Dataset before completion, to mark observed segments.
        #[arg(long)]
        original: Option<PathBuf>,
        #[arg(long)]
        sample_id: Option<String>,
    },
}

/// 2 when the failure is an I/O problem, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<icestack::Error>() {
            if e.is_io() {
                return 2;
            }
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            if e.is_io_error() {
                return 2;
            }
        }
    }
    1
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Parse `args` and run; the return value is the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
