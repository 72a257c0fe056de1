//! `ddlab`: run distillation experiments and render their report.

mod commands;
mod config;
mod exit;
mod plot;
mod report;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use ddlab_core::distill::Method;

use crate::config::Config;
use crate::exit::Exit;
use crate::store::Run;

#[derive(Parser)]
#[command(name = "ddlab", version, about = "Dataset distillation experiments")]
struct Cli {
    /// Key/value config file; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the `out` key.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Restrict to one distillation method (bptt, dm, gm, tm).
    #[arg(long, global = true)]
    method: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic blob dataset and its attributes.
    GenData,
    /// Distill the real training set with each configured method.
    Distill,
    /// Cross-architecture, projection, decomposition and continuation runs.
    Train,
    /// Leave-one-out influence of distilled images on test predictions.
    Influence,
    /// Hessian trace and spectral density along training.
    Curvature,
    /// Loss surfaces on the initialisation/real/distilled plane.
    Landscape,
    /// Prediction agreement against pools of real-trained models.
    Agree,
    /// Mixing distilled images into small real subsets, and clipping.
    Mix,
    /// Recognition of distilled images during real-data training.
    Recognize,
    /// Random hyperparameter search on the distilled sets.
    Search,
    /// Render every figure from the CSV outputs.
    Report,
}

fn resolve(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string()).map_err(|e| anyhow!(Exit::config(e)))?;
    }
    if let Some(o) = &cli.out {
        cfg.set("out", &o.display().to_string()).map_err(|e| anyhow!(Exit::config(e)))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global()?;
    }
    let method = match &cli.method {
        Some(m) => Some(
            Method::parse(m)
                .or_else(|| Method::ALL.into_iter().find(|x| config::prefix(*x) == m))
                .ok_or_else(|| anyhow!(Exit::config(format!("unknown method `{m}`"))))?,
        ),
        None => None,
    };
    let run = Run::new(resolve(&cli)?);
    log::info!("results under {}", run.dir.display());
    let written = match cli.command {
        Command::GenData => commands::gen_data(&run)?,
        Command::Distill => commands::distill(&run, method)?,
        Command::Train => commands::train_cmd(&run, method)?,
        Command::Influence => commands::influence(&run, method)?,
        Command::Curvature => commands::curvature(&run, method)?,
        Command::Landscape => commands::landscape(&run, method)?,
        Command::Agree => commands::agree(&run, method)?,
        Command::Mix => commands::mix(&run, method)?,
        Command::Recognize => commands::recognize(&run, method)?,
        Command::Search => commands::search(&run, method)?,
        Command::Report => report::render(&run)?,
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e) as u8)
        }
    }
}
