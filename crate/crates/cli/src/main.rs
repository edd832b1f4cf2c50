//! `peira`: experiment runner for the population laboratory.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 numerical
//! failure or divergence.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};
use commands::Context;
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "peira", version, about = "Exact population laboratory for predictive joint embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent evaluations.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Canonical spectrum and directions of a table.
    Oracle,
    /// Integrate a population gradient or self-distillation flow.
    Flow,
    /// Enumerate equilibria and check closed-form stability.
    Stability,
    /// Stochastic training with EMA statistics buffers.
    Train,
    /// Merge training metrics into an objective-versus-quality report.
    Report,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let value = config::read_json(&config_path)?;
    let ctx = Context {
        config_path,
        out: cli.out.clone(),
        jobs: cli.jobs,
        seed: cli.seed,
    };
    match cli.command {
        Command::Oracle => commands::oracle(&ctx, value),
        Command::Flow => commands::flow(&ctx, value),
        Command::Stability => commands::stability(&ctx, value),
        Command::Train => commands::train_cmd(&ctx, value),
        Command::Report => commands::report(&ctx, value),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    std::panic::set_hook(Box::new(|info| eprintln!("peira: internal error: {info}")));
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("peira: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(3),
    }
}
