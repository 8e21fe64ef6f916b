mod commands;
mod dataset;
mod error;
mod manifest;
mod settings;

use std::env;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{eval, gen_data, plot, reconstruct, train};
use crate::error::{CliError, Result};
use crate::settings::Settings;

/// Spectral reconstruction from RGB: data generation, three-stage training,
/// evaluation and inference.
#[derive(Parser, Debug)]
#[command(name = "hydra", version)]
struct Cli {
    /// File of `key = value` settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    GenData(gen_data::GenDataArgs),
    Train(train::TrainArgs),
    Eval(eval::EvalArgs),
    Reconstruct(reconstruct::ReconstructArgs),
    Plot(plot::PlotArgs),
}

/// Caps the worker pool at `HYDRA_THREADS` when set.
fn init_threads() -> Result<()> {
    let Ok(value) = env::var("HYDRA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("HYDRA_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(args) => gen_data::run(args, settings),
        Command::Train(args) => train::run(args, settings),
        Command::Eval(args) => eval::run(args, settings),
        Command::Reconstruct(args) => reconstruct::run(args, settings),
        Command::Plot(args) => plot::run(args, settings),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
