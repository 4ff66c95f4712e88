//! `reflow`: train, reflow, sample, invert and diagnose rectified flows on
//! Gaussian-mixture targets from one TOML configuration.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::commands::Command;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{records, sha256_hex, DirLock, Entry, Manifest};

const DEFAULT_OUT: &str = "reflow-out";

#[derive(Parser, Debug)]
#[command(name = "reflow", version, about = "Rectified-flow laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Train one flow on the independent coupling or on stored pairs.
    Train(RunArgs),
    /// Train 1-RF, generate pairs, train the next flow on them, repeat.
    Reflow(RunArgs),
    /// Integrate noise through a trained field and store the pairs.
    GeneratePairs(RunArgs),
    /// Generate samples, counting field evaluations.
    Sample(RunArgs),
    /// Integrate real samples back to noise.
    Invert(RunArgs),
    /// Write a diagnostics report for a trained field.
    Diagnose(RunArgs),
    /// Per-timestep loss of a trained field.
    ProfileLoss(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: config `out_dir`, then `reflow-out`].
    #[arg(long, env = "REFLOW_OUT_DIR")]
    out: Option<PathBuf>,
    /// Replaces every seed of the section being run.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: config `threads`, then all cores].
    #[arg(long, env = "REFLOW_THREADS")]
    threads: Option<usize>,
}

impl Sub {
    fn split(self) -> (Command, RunArgs) {
        match self {
            Sub::Train(a) => (Command::Train, a),
            Sub::Reflow(a) => (Command::Reflow, a),
            Sub::GeneratePairs(a) => (Command::GeneratePairs, a),
            Sub::Sample(a) => (Command::Sample, a),
            Sub::Invert(a) => (Command::Invert, a),
            Sub::Diagnose(a) => (Command::Diagnose, a),
            Sub::ProfileLoss(a) => (Command::ProfileLoss, a),
        }
    }
}

fn execute(command: Command, args: RunArgs) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed.or(cfg.seed) {
        commands::apply_seed(&mut cfg, command, seed);
    }
    let threads = args.threads.or(cfg.threads);
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let dir = args
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    let _lock = DirLock::acquire(&dir)?;
    info!("{} -> {}", command.name(), dir.display());
    let outcome = commands::run(command, &cfg, &dir)?;
    let config_text = serde_json::to_string(&outcome.config).map_err(reflow_core::Error::from)?;
    let entry = Entry {
        config_sha256: sha256_hex(config_text.as_bytes()),
        config: outcome.config,
        seeds: outcome.seeds,
        nfe: outcome.nfe,
        field_evaluations: outcome.field_evaluations,
        files: records(&dir, &outcome.files)?,
    };
    for f in &entry.files {
        println!("{}  {}", f.sha256, f.path);
    }
    let mut manifest = Manifest::load_or_new(&dir);
    manifest.entries.insert(command.name().to_string(), entry);
    manifest.save(&dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (command, args) = Cli::parse().command.split();
    match execute(command, args) {
        Ok(manifest) => {
            info!("manifest: {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
