//! Experiment driver: synthetic truth generation, sequential estimation, and
//! plot-ready reporting over the run artifacts.

mod config;
mod estimate;
mod report;
mod truth;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn runtime_io(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<dcseq::Error> for CliError {
    fn from(e: dcseq::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "dcseq", version, about = "Sequential data-consistent parameter estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic truth artifacts and the noisy packet stream.
    GenerateTruth {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Write exact sensor values instead of noisy ones.
        #[arg(long)]
        noiseless: bool,
    },
    /// Run the sequential estimator over a packet stream.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Packet stream to consume; defaults to packets.ndjson in the run
        /// directory.
        #[arg(long)]
        packets: Option<PathBuf>,
        /// Continue from the saved checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
        /// Override the configured ensemble size.
        #[arg(long)]
        ensemble_size: Option<usize>,
        /// Override the configured engine seed.
        #[arg(long)]
        engine_seed: Option<u64>,
    },
    /// Summarize a finished run into plot-ready tables under report/.
    Report {
        run_dir: PathBuf,
        /// Points per axis in the 1D marginal density dumps.
        #[arg(long, default_value_t = 201)]
        grid_points: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenerateTruth {
            config,
            output_dir,
            noiseless,
        } => {
            let mut cfg = config::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            truth::generate(&cfg.resolve()?, noiseless)
        }
        Cmd::Estimate {
            config,
            output_dir,
            packets,
            resume,
            ensemble_size,
            engine_seed,
        } => {
            let mut cfg = config::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if ensemble_size.is_some() {
                cfg.ensemble_size = ensemble_size;
            }
            if let Some(seed) = engine_seed {
                cfg.seeds.engine = seed;
            }
            estimate::run(&cfg.resolve()?, packets.as_deref(), resume)
        }
        Cmd::Report {
            run_dir,
            grid_points,
        } => report::run(&run_dir, grid_points),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
