//! `metastab` — config-driven experiment runner for the metastability
//! laboratory.
//!
//! Every subcommand reads one TOML experiment file, drives the core
//! pipeline, and writes plot-ready CSV/JSON into the output directory.
//! Runs are deterministic: the same config and seed yield byte-identical
//! outputs at any worker count.

mod commands;
mod config;
mod output;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "metastab",
    version,
    about = "Metastability laboratory for randomly perturbed expanding interval maps"
)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the structural assumptions and write validation.json.
    Validate,
    /// Second eigenvalue, spectral gap, and BV norm per noise size.
    Spectrum,
    /// Monte Carlo, grid-exact, and quadrature transition rates.
    Rates,
    /// Resolvent solves with well oscillations and reduced comparisons.
    Resolvent,
    /// Total-variation stability report along the noise grid.
    Stability,
    /// One long jump-process trajectory reduced to its order path.
    Simulate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| anyhow::anyhow!("cannot configure {workers} workers: {e}"))?;
    }
    let loaded = config::load(&cli.config, cli.seed, cli.out.as_deref())?;
    match cli.command {
        Command::Validate => {
            let passed = commands::cmd_validate(&loaded)?;
            Ok(if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Spectrum => commands::cmd_spectrum(&loaded).map(|()| ExitCode::SUCCESS),
        Command::Rates => commands::cmd_rates(&loaded).map(|()| ExitCode::SUCCESS),
        Command::Resolvent => commands::cmd_resolvent(&loaded).map(|()| ExitCode::SUCCESS),
        Command::Stability => commands::cmd_stability(&loaded).map(|()| ExitCode::SUCCESS),
        Command::Simulate => commands::cmd_simulate(&loaded).map(|()| ExitCode::SUCCESS),
    }
}
