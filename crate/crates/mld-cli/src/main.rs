//! `mld`: train, sample, evaluate, and benchmark motion latent diffusion
//! models from the command line.
//!
//! Every subcommand reads an optional JSON configuration file, applies flag
//! overrides on top (flags win), validates the result before any work
//! starts, and writes outputs into a run directory alongside the resolved
//! configuration. Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;
mod error;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliResult;

#[derive(Parser)]
#[command(
    name = "mld",
    version,
    about = "Motion latent diffusion: synthesize data, train, sample, evaluate, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled and captioned motion corpus
    SynthData(commands::synth::SynthArgs),
    /// Stage one: train the motion VAE
    TrainVae(commands::train_vae::TrainVaeArgs),
    /// Stage two: train latent diffusion over a frozen VAE
    TrainDiffusion(commands::train_diffusion::TrainDiffusionArgs),
    /// Draw motions from a trained model
    Sample(commands::sample::SampleArgs),
    /// Compute evaluation metrics between a real and a generated corpus
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Measure average inference time per prompt, with a raw-space baseline
    Bench(commands::bench::BenchArgs),
    /// Describe a checkpoint, motion file, or manifest
    Inspect(commands::inspect::InspectArgs),
}

/// Flags shared by every subcommand that produces outputs.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file; explicit flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Run directory: resolved config echo, checkpoints/, samples/,
    /// metrics/, log.jsonl
    #[arg(long, value_name = "DIR", default_value = "run")]
    pub run_dir: PathBuf,

    /// Seed; falls back to the config file, then MLD_SEED, then 0
    #[arg(long)]
    pub seed: Option<u64>,

    /// Worker-thread cap for parallel sections (evaluate); 1 means serial
    #[arg(long)]
    pub threads: Option<usize>,

    /// Accept latent token counts outside the preset list {1, 2, 5, 7, 10}
    #[arg(long)]
    pub allow_any_n: bool,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::SynthData(a) => commands::synth::run(a),
        Cmd::TrainVae(a) => commands::train_vae::run(a),
        Cmd::TrainDiffusion(a) => commands::train_diffusion::run(a),
        Cmd::Sample(a) => commands::sample::run(a),
        Cmd::Evaluate(a) => commands::evaluate::run(a),
        Cmd::Bench(a) => commands::bench::run(a),
        Cmd::Inspect(a) => commands::inspect::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
