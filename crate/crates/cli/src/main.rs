//! `tam`: dataset generation, training, evaluation, complexity accounting,
//! gradient checking and kernel inspection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tam_core::TamError;

#[derive(Debug)]
pub enum CliError {
    /// A check ran and failed (gradient check, divergence).
    Check(String),
    Config(String),
    Io(String),
    Checkpoint(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
        }
    }
}

impl From<TamError> for CliError {
    fn from(e: TamError) -> Self {
        let msg = e.to_string();
        match e {
            TamError::Config(_) | TamError::Shape { .. } | TamError::Json(_) | TamError::MissingParam(_) => CliError::Config(msg),
            TamError::Io(_) | TamError::Format(_) => CliError::Io(msg),
            TamError::CheckpointMismatch { .. } => CliError::Checkpoint(msg),
            TamError::NonFinite { .. } | TamError::Backward(_) | TamError::NanGradient { .. } | TamError::Diverged { .. } => {
                CliError::Check(msg)
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "tam", version, about = "Temporal adaptive module toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialise a synthetic dataset cache.
    GenData {
        /// Dataset spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes metrics.csv and best.tamc into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use a cache written by gen-data instead of generating in memory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Top-1/top-5 of a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Single-view multiply-accumulates of a named architecture.
    Flops {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Trainable parameters of a named architecture.
    Params {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Operators to check (repeatable or comma separated); all by default.
        #[arg(long, value_delimiter = ',')]
        op: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = tam_core::analysis::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Per-video kernels of selected temporal layers.
    InspectKernels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Layer names, `last` or `stageN.last` (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "last")]
        layers: Vec<String>,
        /// CSV destination; the summary goes next to it as JSON.
        #[arg(long)]
        out: PathBuf,
        /// Only the first N validation videos.
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn setup() -> Result<(), CliError> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    tam_core::parallel::init_from_env();
    if let Ok(v) = std::env::var("TAM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("TAM_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(CliError::Config("TAM_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    setup()?;
    match cli.command {
        Command::GenData { spec, out } => commands::gen_data(&spec, &out),
        Command::Train { config, out, data } => commands::train(&config, &out, data.as_deref()),
        Command::Eval { checkpoint, config, data } => commands::eval(&checkpoint, &config, data.as_deref()),
        Command::Flops { arch, frames, size } => commands::flops(&arch, frames, size),
        Command::Params { arch, frames } => commands::params(&arch, frames),
        Command::Gradcheck { op, seeds, tolerance } => commands::gradcheck(&op, seeds, tolerance),
        Command::InspectKernels {
            checkpoint,
            config,
            layers,
            out,
            videos,
            data,
        } => commands::inspect_kernels(&checkpoint, &config, &layers, &out, videos, data.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
