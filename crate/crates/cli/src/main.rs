//! `enstf`: synthetic data, training, evaluation and diagnostics for ensemble
//! post-processing models.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ens_transformer::Scalar;

use config::{prepare_out, stamp, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "enstf", version, about = "Ensemble post-processing with self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must not exist unless --force.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Compute in 64-bit floating point.
    #[arg(long = "f64", global = true)]
    f64: bool,
}

#[derive(Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train a model on a dataset.
    Train,
    /// Score a checkpoint or the raw ensemble.
    Evaluate,
    /// Dump attention maps and weights for one sample.
    Attention,
    /// Correlation fields around one grid point, raw and post-processed.
    Correlate,
}

fn dispatch<T: Scalar>(command: Command, cfg: &mut RunConfig, out: &std::path::Path) -> Result<(), CliError> {
    match command {
        Command::Synth => commands::synth::<T>(cfg, out),
        Command::Train => commands::train::<T>(cfg, out),
        Command::Evaluate => commands::evaluate_cmd::<T>(cfg, out),
        Command::Attention => commands::attention::<T>(cfg, out),
        Command::Correlate => commands::correlate::<T>(cfg, out),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.ok_or_else(|| CliError::config("--out DIR is required"))?;
    let inputs: Vec<&std::path::Path> = [&cfg.data, &cfg.checkpoint, &cfg.resume, &cli.config]
        .into_iter()
        .flatten()
        .map(|p| p.as_path())
        .collect();
    prepare_out(&out, cli.force, &inputs)?;
    let result = if cli.f64 {
        dispatch::<f64>(cli.command, &mut cfg, &out)
    } else {
        dispatch::<f32>(cli.command, &mut cfg, &out)
    };
    if result.is_err() {
        // keep partial outputs such as the last trainer state, drop empty leftovers
        let _ = std::fs::remove_dir(&out);
    }
    result?;
    stamp(&out, &cfg.resolved())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("enstf: {e}");
            ExitCode::from(e.code)
        }
    }
}
