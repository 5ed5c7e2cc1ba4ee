//! `downwave` — conditional diffusion super-resolution of gridded
//! reflectivity fields, end to end: synthetic data generation, training in
//! a configurable coefficient domain (pixel or Haar wavelet packet),
//! sampling, verification metrics, and transform benchmarking.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! divergence.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use downwave_core::CoreError;

#[derive(Parser)]
#[command(
    name = "downwave",
    version,
    about = "Wavelet-domain conditional diffusion for super-resolving gridded reflectivity fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override every section's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the sampler step count (sampling and bench).
    #[arg(long)]
    steps: Option<usize>,
    /// Override the domain transform: identity | haar-1 | haar-2.
    #[arg(long)]
    transform: Option<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CoreError> {
        let overrides = Overrides {
            seed: self.seed,
            steps: self.steps,
            transform: self.transform.clone(),
        };
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event-filtered dataset of HR/LR pairs.
    GenData(Common),
    /// Train the conditional denoiser; writes a checkpoint and a loss log.
    Train(TrainArgs),
    /// Super-resolve low-resolution fields with a trained checkpoint.
    Sample(Common),
    /// Score predictions against truth (with a bicubic baseline).
    Evaluate(Common),
    /// Compare sampling wall time across domain transforms.
    Bench(Common),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Continue from the checkpoint at paths.checkpoint.
    #[arg(long)]
    resume: bool,
}

fn dispatch(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::GenData(c) => commands::gen_data::run(&c.load()?),
        Command::Train(t) => commands::train::run(&t.common.load()?, t.resume),
        Command::Sample(c) => commands::sample::run(&c.load()?),
        Command::Evaluate(c) => commands::evaluate::run(&c.load()?),
        Command::Bench(c) => commands::bench::run(&c.load()?),
    }
}

fn exit_code(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_) | CoreError::Argument(_) => 2,
        CoreError::Format(_) | CoreError::Io(_) | CoreError::Dimension(_) => 3,
        CoreError::Divergence { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
