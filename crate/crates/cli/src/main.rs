//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 missing or unreadable
//! checkpoint, 5 file I/O, 6 runtime failure, 130 interrupted.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "flapsim", version, about = "Flapping-wing flight simulation, training and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML); defaults apply to anything left out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; beats FLAPSIM_OUT_DIR and the configured one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Curriculum stage 1-4.
    #[arg(long, global = true)]
    pub stage: Option<u8>,
    /// Episode count for simulate, evaluate and sweep.
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    /// Policy checkpoint (JSON).
    #[arg(long, global = true)]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Bin,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fly episodes with a policy, or the zero action without one, and log them.
    Simulate,
    /// Train a policy with PPO through the curriculum.
    Train,
    /// Report tracking error of a policy over several episodes.
    Evaluate,
    /// Identify the closed loop from io data, or collect it with --policy.
    Sysid {
        /// Io data CSV written by an earlier sysid run or another tool.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Success rates over fluid coefficient factors and winds.
    Sweep,
    /// Spectra and phase portraits of the joints in a rollout log.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        /// Seconds of transient skipped before analysis.
        #[arg(long, default_value_t = 1.0)]
        skip_s: f64,
    },
    /// Convert a log table between CSV, binary and JSON.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const CHECKPOINT: u8 = 4;
    pub const IO: u8 = 5;
    pub const RUNTIME: u8 = 6;
    pub const INTERRUPTED: u8 = 130;

    pub fn usage(m: impl Into<String>) -> Self {
        Self { code: Self::USAGE, message: m.into() }
    }

    pub fn config(m: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, message: m.into() }
    }

    pub fn checkpoint(m: impl Into<String>) -> Self {
        Self { code: Self::CHECKPOINT, message: m.into() }
    }

    pub fn io(m: impl Into<String>) -> Self {
        Self { code: Self::IO, message: m.into() }
    }

    pub fn runtime(m: impl Into<String>) -> Self {
        Self { code: Self::RUNTIME, message: m.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<flapsim::Error> for CliError {
    fn from(e: flapsim::Error) -> Self {
        use flapsim::Error as E;
        let code = match &e {
            E::Io(_) => Self::IO,
            E::Config(_) => Self::CONFIG,
            E::Checkpoint(_) => Self::CHECKPOINT,
            _ => Self::RUNTIME,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    commands::install_interrupt_handler();
    match commands::execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
