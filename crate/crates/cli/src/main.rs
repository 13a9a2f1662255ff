//! `less`: pre-segmentation, simulated annotation, training and evaluation
//! of LiDAR sequences in the KITTI layout.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or missing inputs; exit code 1.
    Usage(String),
    /// Failure while reading, processing or writing data; exit code 2.
    Data(String),
}

impl From<less_core::Error> for CliError {
    fn from(e: less_core::Error) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "less", version, about = "Label-efficient LiDAR semantic segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input sequence directory.
    #[arg(long = "in", global = true)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long = "out", global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Configuration override `key.path=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Model checkpoint (written by `train`, read by `distill` and `eval`).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Teacher checkpoint for `distill`.
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic labeled sequence.
    Synth,
    /// Pre-segment every window of a sequence.
    Preseg,
    /// Simulate annotation and derive sparse, weak and propagated labels.
    Label,
    /// Component purity and label coverage.
    Stats,
    /// Train a single- or multi-scan model.
    Train,
    /// Fine-tune a single-scan model against a multi-scan teacher.
    Distill,
    /// Per-class IoU of a checkpoint.
    Eval,
    /// Colored components as ASCII PLY.
    ExportPly,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = &cli.common;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let config = RunConfig::resolve(&Overrides {
        config: common.config.as_deref(),
        sets: &common.sets,
        input: common.input.as_deref(),
        output: common.output.as_deref(),
        seed: common.seed,
    })?;
    let ctx = commands::Context {
        config,
        model: common.model.clone(),
        teacher: common.teacher.clone(),
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Preseg => commands::preseg(&ctx),
        Command::Label => commands::label(&ctx),
        Command::Stats => commands::stats(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Distill => commands::distill(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::ExportPly => commands::export_ply(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LESS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
