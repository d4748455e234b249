//! `forge`: episode assembly, quality filtering, metric reports and CAPM
//! verification runs.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or validation error,
//! 4 numeric guard.

mod capm_cmd;
mod config;
mod error;
mod eval;
mod filter;
mod io;
mod retrieve;
mod table;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{FlagOverrides, ForgeConfig};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Build, filter and score in-context learning episodes")]
struct Cli {
    /// JSON config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assemble k-shot episodes by fused similarity and DPP, or by an intent rule.
    Retrieve(retrieve::RetrieveArgs),
    /// Keep metadata records whose score lies within closed bounds.
    Filter(filter::FilterArgs),
    /// Metric reports over result files.
    #[command(subcommand)]
    Eval(eval::EvalCommand),
    /// Run the prototype modulator on seeded random inputs.
    #[command(subcommand)]
    Capm(capm_cmd::CapmCommand),
    /// Lint episode, embedding, metadata and demonstration files.
    Validate(validate::ValidateArgs),
}

fn settings(cli: &Cli, flags: FlagOverrides) -> Result<ForgeConfig> {
    let file = cli.config.as_deref().map(config::load_file).transpose()?;
    config::resolve(file.as_ref(), &flags)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Retrieve(a) => {
            let cfg = settings(
                cli,
                FlagOverrides {
                    lambda: a.lambda,
                    beta: a.beta,
                    top_n: a.top_n,
                    k: a.k,
                    ..Default::default()
                },
            )?;
            retrieve::run(a, &cfg)
        }
        Command::Filter(a) => filter::run(a),
        Command::Eval(c) => eval::run(c),
        Command::Capm(c) => {
            let f = c.flags();
            let cfg = settings(
                cli,
                FlagOverrides {
                    seed: f.seed,
                    capm: f.overrides(),
                    ..Default::default()
                },
            )?;
            log::info!("capm seed {} with {:?}", cfg.seed, cfg.capm);
            capm_cmd::run(c, &cfg)
        }
        Command::Validate(a) => validate::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind.code() as u8)
        }
    }
}
