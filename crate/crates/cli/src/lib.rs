//! Command-line front end: strict run configs, UCKP checkpoints, raw array
//! and PNG outputs, and reproducible run manifests.

pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use jointdiff::{Error, Result};
use serde_json::Value;

use crate::commands::{EvalTask, SampleArgs};
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "jointdiff", version, about = "Joint diffusion over paired images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the single-branch base model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train an adapter set on top of a frozen base.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
    },
    /// Run a sampling plan.
    Sample {
        #[arg(long)]
        base: PathBuf,
        /// Adapter checkpoint; repeat for multi-condition sampling.
        #[arg(long = "adapter")]
        adapters: Vec<PathBuf>,
        /// Preset name, inline JSON, or path to a JSON plan.
        #[arg(long)]
        plan: String,
        /// Level count `S` for presets given by name.
        #[arg(long, default_value_t = 50)]
        levels: usize,
        /// Directory holding x.npy and y.npy (y0.npy, y1.npy, ... for
        /// several adapters).
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// One weight per adapter, or a (w_xc, w_cx) pair per adapter.
        #[arg(long)]
        combine_weights: Option<String>,
        /// Side length when neither inputs nor the base record it.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Evaluate checkpoints against the thresholds of the config.
    Eval {
        #[arg(long, value_enum)]
        task: EvalTask,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long = "adapter")]
        adapters: Vec<PathBuf>,
    },
    /// Write generated pairs to raw arrays with a manifest.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Range(_) | Error::Schedule(_) | Error::Combination(_) | Error::Json(_) => 2,
        Error::Shape(_) | Error::Alignment(_) | Error::Adapter(_) | Error::Checkpoint(_) => 3,
        Error::MissingInput(_) => 4,
        Error::Numerical(_) => 5,
        Error::Io(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Pretrain { config } => commands::pretrain(&RunConfig::load(&config)?),
        Command::Adapt { config, base } => commands::adapt(&RunConfig::load(&config)?, &base),
        Command::Sample {
            base,
            adapters,
            plan,
            levels,
            inputs,
            n,
            seed,
            out,
            combine_weights,
            size,
        } => commands::sample(&SampleArgs {
            base,
            adapters,
            plan,
            levels,
            inputs,
            n,
            seed,
            out,
            combine_weights,
            size,
        }),
        Command::Eval {
            task,
            config,
            base,
            adapters,
        } => commands::evaluate(&RunConfig::load(&config)?, task, &base, &adapters),
        Command::ExportData { config, n, out } => commands::export_data(&RunConfig::load(&config)?, n, &out),
    }
}
