//! Command-line front end: ingestion, training, evaluation, prediction,
//! backtesting and report bundling, all driven by one TOML config.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use cryptomamba::data::SplitName;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<cryptomamba::data::DataError> for CliError {
    fn from(e: cryptomamba::data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "cryptomamba", version, about = "Selective state-space price forecasting and backtesting")]
pub struct Cli {
    /// Config file; falls back to $CRYPTOMAMBA_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a CSV file, then print its bar count and date range.
    Ingest {
        /// CSV file; defaults to the config's data_path.
        path: Option<PathBuf>,
    },
    /// Train a model and write checkpoint.bin and history.csv.
    Train,
    /// Write regression metrics for the model and the persistence baseline.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the next-day close forecast after the last bar of the data file.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Simulate every configured strategy on one split.
    Backtest {
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Bundle existing artifacts into report.json.
    Report,
}

/// Runs one command; messages go to `out`.
pub fn run(cli: &Cli, out: &mut impl std::io::Write) -> Result<(), CliError> {
    if let Command::Ingest { path: Some(p) } = &cli.command {
        return commands::ingest(p, out);
    }
    let path = config::resolve_path(cli.config.as_deref())?;
    let cfg = config::load_config(&path, &cli.overrides)?;
    match &cli.command {
        Command::Ingest { .. } => commands::ingest(&cfg.data_path, out),
        Command::Train => commands::train(&cfg, out),
        Command::Evaluate { split, checkpoint } => {
            commands::evaluate(&cfg, checkpoint.as_deref(), *split, out)
        }
        Command::Predict { checkpoint } => commands::predict(&cfg, checkpoint.as_deref(), out),
        Command::Backtest { split, checkpoint } => {
            commands::backtest(&cfg, checkpoint.as_deref(), *split, out)
        }
        Command::Report => commands::report(&cfg, out),
    }
}
