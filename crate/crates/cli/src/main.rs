//! `kvbridge`: profile a model pair, plan cache-loading timelines, simulate
//! serving, and summarize the results.

mod config;
mod plan;
mod profile;
mod report;
mod serve;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use kvbridge::sched::Strategy;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "kvbridge", version, about = "Cross-model KV-cache reuse toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the run configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::defaults(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sweep contiguous recompute groups and write the profile artifact.
    Profile,
    /// Plan a transfer/recompute timeline for a scenario.
    Plan {
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Scenario file; the bundled two-model example when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Simulate serving over the configured arrival-rate grid.
    Serve,
    /// Summarize a metrics CSV written by `serve`.
    Report {
        /// Metrics CSV; defaults to `metrics.csv` in the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum StrategyArg {
    Naive,
    ReuseOnly,
    Pipelined,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Naive => Strategy::Naive,
            StrategyArg::ReuseOnly => Strategy::ReuseOnly,
            StrategyArg::Pipelined => Strategy::Pipelined,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let common = &cli.common;
    match cli.command {
        Command::Profile => profile::run(&common.run_config()?, &common.out),
        Command::Plan { strategy, scenario } => plan::run(strategy.into(), scenario.as_deref(), &common.out),
        Command::Serve => serve::run(&common.run_config()?, &common.out),
        Command::Report { input } => {
            let input = input.unwrap_or_else(|| common.out.join("metrics.csv"));
            report::run(&input, &common.out)
        }
    }
}
