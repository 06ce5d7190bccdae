// SPDX-License-Identifier: Apache-2.0

//! Command-line front end: argument parsing, config layering and the
//! `fuzz`, `replay`, `triage`, `stats`, `experiment` and `list` commands.

pub mod commands;
pub mod config;
pub mod experiment;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{EXIT_BUGS, EXIT_CLEAN, EXIT_USAGE, run};

#[derive(Debug, Parser)]
#[command(name = "devfuzz", version, about = "Fuzz model drivers through a simulated device interface")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a fuzzing campaign.
    Fuzz(CampaignArgs),
    /// Rerun one input, or every report in a reports file.
    Replay(ReplayArgs),
    /// Group a reports file by bug.
    Triage {
        reports: PathBuf,
    },
    /// Print a stats file written by `fuzz`.
    Stats {
        stats: PathBuf,
    },
    /// Run one of the paired comparisons.
    Experiment(ExperimentArgs),
    /// List catalog drivers.
    List,
}

/// Flags shared by `fuzz` and `replay`; each overrides the config file.
#[derive(Debug, Args, Clone, Default)]
pub struct CampaignArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub driver: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `targeted`, `none` or `random MIN MAX`.
    #[arg(long)]
    pub irq: Option<String>,
    /// `on` or `off`.
    #[arg(long, value_name = "SWITCH")]
    pub delay_reduction: Option<String>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long)]
    pub budget_seconds: Option<f64>,
    /// Corpus directory (default `<out>/corpus`).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "devfuzz-out")]
    pub out: PathBuf,
    /// `default` or `extended`.
    #[arg(long)]
    pub harness: Option<String>,
    /// Resource operations per iteration; implies `--harness extended`.
    #[arg(long)]
    pub ops: Option<u32>,
    #[arg(long)]
    pub stop_on_first_bug: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub campaign: CampaignArgs,
    /// Raw input bytes to replay.
    #[arg(required_unless_present = "reports", conflicts_with = "reports")]
    pub input: Option<PathBuf>,
    /// Replay every line of a reports file instead.
    #[arg(long)]
    pub reports: Option<PathBuf>,
    /// Warn when the effective config hash differs (hex, as in `config_hash`).
    #[arg(long)]
    pub expect_hash: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// `delay`, `irq` or `ttb`.
    pub name: experiment::Experiment,
    #[arg(long)]
    pub runs: Option<u32>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub budget_seconds: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long, default_value = "devfuzz-out")]
    pub out: PathBuf,
}
