//! Command-line front end: train, estimate the spectrum, score and run experiments.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{Run, SeedFailures};
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "locens", version, about = "Local-ensemble extrapolation scores for small MLPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train(Common),
    /// Estimate the top of the training-loss Hessian spectrum.
    Spectrum(Common),
    /// Score every row of the test file.
    Score(Common),
    /// Run a named experiment over its seeds.
    Experiment(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Score variant; repeatable.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let (common, f): (&Common, fn(&Run) -> anyhow::Result<()>) = match &cli.command {
        Command::Train(c) => (c, commands::cmd_train),
        Command::Spectrum(c) => (c, commands::cmd_spectrum),
        Command::Score(c) => (c, commands::cmd_score),
        Command::Experiment(c) => (c, commands::cmd_experiment),
    };
    let overrides = Overrides {
        out: common.out.clone(),
        seed: common.seed,
        m: common.m,
        variants: common.variants.clone(),
    };
    let run = Run::new(RunConfig::load(&common.config, &overrides)?)?;
    f(&run)
}

/// 2 for numerical failures anywhere in the chain, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<local_ensembles::Error>() {
            return if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE };
        }
        if let Some(f) = cause.downcast_ref::<SeedFailures>() {
            return if f.numerical { EXIT_NUMERICAL } else { EXIT_USAGE };
        }
    }
    EXIT_USAGE
}
