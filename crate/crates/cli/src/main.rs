//! `vacfill`: command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 computation error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::output::Outputs;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("compute error: {0}")]
    Compute(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compute(_) => 3,
        }
    }
}

pub fn compute<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Compute(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "vacfill", version, about = "Specular billiards, transport and lower-bound certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output` in the config).
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Backward rebound chain as CSV.
    Trace,
    /// Boundary phase-pair classes as CSV.
    Classify,
    /// L2 norm of the free-transport solution over time.
    Transport,
    /// Numerical check of a collision-operator bound.
    LemmaCheck,
    /// Lower-bound certificate as JSON plus an audit CSV.
    Certificate,
    /// Grazing constants, h_p tables and falsification trials.
    Grazing,
    /// Desk-scale kinetic simulation.
    Simulate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Trace => "trace",
            Command::Classify => "classify",
            Command::Transport => "transport",
            Command::LemmaCheck => "lemma-check",
            Command::Certificate => "certificate",
            Command::Grazing => "grazing",
            Command::Simulate => "simulate",
        }
    }
}

fn threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("VF_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("VF_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(compute)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    threads()?;
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("missing --config <FILE>".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg = config::parse(&text)?;
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    let dir = cli.out.clone().or_else(|| cfg.output.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    let mut out = Outputs::new(dir, hash, cli.command.name());
    let result = out.prepare().and_then(|_| commands::dispatch(cli.command, &cfg, &mut out));
    if result.is_err() {
        out.cleanup();
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
