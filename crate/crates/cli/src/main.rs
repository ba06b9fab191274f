//! Command-line driver: wires a JSON run configuration into solves, sweeps,
//! policy comparisons, Q-learning runs, and truncation studies, emitting
//! tables and curves as CSV/JSON files.
//!
//! Exit codes: 0 success, 1 configuration or stability error, 2 when the
//! truncation misses its tolerance or a benchmark beats the solved policy.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "dynbatch", about = "Dynamic batching policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one configuration: policy.csv, solve.json, eval.json.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        /// Also dump the truncated model's (s, a, y, c, lump) table.
        #[arg(long)]
        dump_model: Option<PathBuf>,
    },
    /// Solve a rho x w2 grid: tradeoff.csv, policies.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Benchmark policies against the solved one: comparison.csv.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train tabular Q-learning: snapshots.csv, agreement.csv.
    Qlearn {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Minimal acceptable truncation per overflow cost: table1.csv.
    TruncationStudy {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Parser)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the simulation and Q-learning seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps and comparisons (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            config.simulation.seed = seed;
            if let Some(q) = config.qlearn.as_mut() {
                q.seed = seed;
            }
        }
        if let Some(jobs) = self.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global()
                .ok();
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Solve { common, dump_model } => common
            .load()
            .and_then(|c| commands::cmd_solve(&c, dump_model.as_deref())),
        Command::Sweep { common } => common.load().and_then(|c| commands::cmd_sweep(&c)),
        Command::Compare { common } => common.load().and_then(|c| commands::cmd_compare(&c)),
        Command::Qlearn { common } => common.load().and_then(|c| commands::cmd_qlearn(&c)),
        Command::TruncationStudy { common } => common
            .load()
            .and_then(|c| commands::cmd_truncation_study(&c)),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
