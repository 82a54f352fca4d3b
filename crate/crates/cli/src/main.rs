//! `clusterbw` command-line interface.
//!
//! Exit codes: 0 on success, 1 when every requested estimator failed,
//! 2 for configuration or input errors.

mod commands;
mod config;
mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("{0}")]
    Io(String),
    #[error("every estimator failed")]
    AllFailed(Vec<PathBuf>),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::AllFailed(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "clusterbw",
    version,
    about = "Balancing weights for treatment effects in clustered observational data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the ATT with every configured estimator.
    Estimate(CommonArgs),
    /// Report covariate balance before and after weighting.
    Balance(CommonArgs),
    /// Run the Monte Carlo simulation.
    Simulate(CommonArgs),
    /// Check a configuration without writing outputs.
    Validate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

type Runner = fn(&commands::Common) -> Result<Vec<String>, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&CommonArgs, Runner) = match &cli.command {
        Command::Estimate(a) => (a, |c| paths(commands::estimate(c))),
        Command::Balance(a) => (a, |c| paths(commands::balance(c))),
        Command::Simulate(a) => (a, |c| paths(commands::simulate(c))),
        Command::Validate(a) => (a, commands::validate),
    };
    if let Some(t) = args.threads {
        if t == 0 {
            eprintln!("clusterbw: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("clusterbw: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let common = commands::Common {
        config: args.config.clone(),
        out: args.out.clone(),
        seed: args.seed,
    };
    match run(&common) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let CliError::AllFailed(written) = &e {
                for p in written {
                    println!("{}", p.display());
                }
            }
            eprintln!("clusterbw: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn paths(r: Result<Vec<PathBuf>, CliError>) -> Result<Vec<String>, CliError> {
    r.map(|v| v.iter().map(|p| p.display().to_string()).collect())
}
