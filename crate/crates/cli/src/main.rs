//! `cdgp`: configuration-driven runs of the constrained deep GP toolkit.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cdgp::experiments::Task;
use clap::{Parser, Subcommand};

use crate::commands::Output;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cdgp", version, about = "Constrained deep Gaussian process priors: sampling, concentration, inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overrides `run.out`; created when missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, overrides `run.threads` (0 = logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Draw constrained deep prior samples.
    Sample,
    /// Small-ball probabilities by splitting.
    Smallball,
    /// The deep concentration function and the rate it implies.
    Concentration,
    /// Posterior sampling for density estimation.
    FitDensity,
    /// Posterior sampling for binary classification.
    FitClassify,
    /// Contraction study over a schedule of sample sizes.
    Study,
    /// The invariant battery; exits nonzero when any check fails.
    Check,
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let path = cli.config.context("--config is required")?;
    let mut cfg = RunConfig::load(&path).with_context(|| format!("in {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(t) = cli.threads {
        cfg.set_threads(t);
    }
    if let Some(o) = &cli.out {
        cfg.set_out(o);
    }
    let threads = cfg.usize("run.threads");
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let mut out = Output::new(&cfg.out_dir())?;
    let ok = match cli.command {
        Command::Sample => commands::cmd_sample(&cfg, &mut out),
        Command::Smallball => commands::cmd_smallball(&cfg, &mut out),
        Command::Concentration => commands::cmd_concentration(&cfg, &mut out),
        Command::FitDensity => commands::cmd_fit(&cfg, Task::Density, &mut out),
        Command::FitClassify => commands::cmd_fit(&cfg, Task::Classification, &mut out),
        Command::Study => commands::cmd_study(&cfg, &mut out),
        Command::Check => commands::cmd_check(&cfg, &mut out),
    };
    for p in &out.written {
        println!("wrote {}", p.display());
    }
    ok
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("cdgp: some operations failed; see the outputs above");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("cdgp: {e:#}");
            ExitCode::from(2)
        }
    }
}
