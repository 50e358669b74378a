//! `milestone-kit`: config-driven milestoning experiments.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical or
//! input failure, 3 failed validation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "milestone-kit", version, about = "Milestoning for elliptic diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(short = 'c', long = "config")]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured number of worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue despite under-sampled milestones.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Invariant density, backward committor, level sets and hitting densities.
    Committor(Common),
    /// Transition statistics from a long run or from reflected cells.
    Sample(Common),
    /// Mean first passage times by the configured methods.
    Mfpt(Common),
    /// Runs the acceptance checks.
    Validate(Common),
    /// First-hitting kernel estimation and the exact-milestoning solve.
    Exact(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Committor(c) => commands::run(commands::Kind::Committor, c),
        Command::Sample(c) => commands::run(commands::Kind::Sample, c),
        Command::Mfpt(c) => commands::run(commands::Kind::Mfpt, c),
        Command::Validate(c) => commands::run(commands::Kind::Validate, c),
        Command::Exact(c) => commands::run(commands::Kind::Exact, c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
