//! `mddm`: synthesize moiré data, train, run and evaluate the demoiréing
//! network, check gradients and report model size.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::CliConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] mddm::Error),

    #[error("{} missing file(s): {}", .0.len(), .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Core(mddm::Error::Divergence { .. } | mddm::Error::NonFinite(_)) => 2,
            CliError::Usage(_) => 3,
            CliError::Core(mddm::Error::Config(_) | mddm::Error::InvalidShape(_)) => 3,
            CliError::MissingFiles(_) => 4,
            CliError::Core(mddm::Error::Io { .. } | mddm::Error::Image { .. } | mddm::Error::Format { .. }) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mddm", version, about = "Multi-resolution demoiréing network")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for every random choice; overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (synth, train) or file (infer, eval CSV).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write clean/moiré PNG pairs and a manifest into --out.
    Synth {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train on a manifest; writes model.ckpt and loss.csv into --out.
    Train {
        /// Dataset manifest (or the `train.data` key).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Continue from a checkpoint; its model configuration is used.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Demoiré one PNG into --out.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Per-pair and mean PSNR/SSIM over a manifest; --out writes a CSV.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of every layer and the toy model.
    Gradcheck {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Parameter and FLOP table of the configured model.
    Params {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// List configuration keys.
    Keys,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let load = |overrides: &[String]| CliConfig::load(cli.config.as_deref(), overrides, cli.seed);
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Synth { overrides } => commands::synth(&load(overrides)?, out),
        Command::Train {
            data,
            resume,
            overrides,
        } => commands::train(&load(overrides)?, data.as_deref(), resume.as_deref(), out),
        Command::Infer {
            checkpoint,
            input,
            overrides,
        } => {
            load(overrides)?;
            commands::infer_png(checkpoint, input, out)
        }
        Command::Eval {
            checkpoint,
            manifest,
            overrides,
        } => commands::eval(&load(overrides)?, checkpoint, manifest, out),
        Command::Gradcheck { overrides } => commands::gradcheck(&load(overrides)?),
        Command::Params { overrides } => commands::params(&load(overrides)?),
        Command::Keys => {
            for (k, d) in config::KEYS {
                println!("{k:<28} {d}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(p) = cli.config.as_deref().filter(|p| !Path::new(p).is_file()) {
        eprintln!("error: config file {} does not exist", p.display());
        return ExitCode::from(3);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
