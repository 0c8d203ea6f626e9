//! `dul`: dataset generation, training, evaluation, analysis and sweeps
//! for data uncertainty learning. See `commands` for the output files and
//! `config` for the config format.

mod commands;
mod config;
mod failure;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::failure::{exit_code, Failure};

#[derive(Parser)]
#[command(
    name = "dul",
    version,
    about = "Data uncertainty learning on synthetic identity data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic identity dataset.
    Gen(Common),
    /// Train a baseline, DUL_cls or DUL_rgs model.
    Train(Common),
    /// Verification ROC and rank-1 of a checkpoint on a dataset.
    Eval(Common),
    /// Uncertainty, bad-case, intra-class and blur-pair reports.
    Analyze(Common),
    /// Train and evaluate over a lambda or noise-fraction grid.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Forces eps = 0 in the stochastic classification loss.
    #[arg(long)]
    debug_zero_eps: bool,
}

fn load(c: &Common) -> Result<RunConfig> {
    let text = fs::read_to_string(&c.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", c.config.display())))?;
    let overrides = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        zero_eps: c.debug_zero_eps,
    };
    Ok(RunConfig::parse(&text)?.resolve(&overrides))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => commands::gen(&load(&c)?),
        Command::Train(c) => commands::train(load(&c)?),
        Command::Eval(c) => commands::eval(&load(&c)?),
        Command::Analyze(c) => commands::analyze(&load(&c)?),
        Command::Sweep(c) => commands::sweep(&load(&c)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
