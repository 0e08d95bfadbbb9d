//! Command-line front end: experiment configs, commands and report files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;

use commands::Verdict;
use config::{ExperimentConfig, MetricName, Resolved};

#[derive(Debug)]
pub enum CliError {
    /// Bad config file, flag or input file.
    Config(String),
    /// Failure while running a command.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pdmpclt",
    version,
    about = "Simulate switched-semiflow PDMPs and test their central limit theorem"
)]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "PDMPCLT_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate trajectories and write the jump skeleton.
    Simulate(RunArgs),
    /// Check the drift, ergodicity and flow/jump hypotheses.
    Check(RunArgs),
    /// Estimate the asymptotic variance three ways.
    Sigma2(RunArgs),
    /// Sample the CLT statistic and test it against N(0, σ²).
    Clt(RunArgs),
    /// check, sigma2 and clt in one report.
    FullReport(RunArgs),
    /// Fortet–Mourier distance between two empirical measures.
    Fm {
        /// CSV with header `regime,y0[,y1..][,weight]`.
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        regime_weight: f64,
        #[arg(long, value_enum, default_value = "euclidean")]
        y_metric: MetricName,
        /// Write an optimal test function to this CSV.
        #[arg(long)]
        dual: Option<PathBuf>,
        #[arg(long, default_value_t = pdmpclt::fm::DEFAULT_SUPPORT_CAP)]
        support_cap: usize,
    },
}

fn resolve(args: &RunArgs) -> Result<Resolved, CliError> {
    let config = ExperimentConfig::load(&args.config)?;
    Resolved::new(config, args.seed, args.out.clone())
}

fn dispatch(cmd: &Command) -> Result<Verdict, CliError> {
    match cmd {
        Command::Simulate(a) => commands::simulate_cmd(&resolve(a)?),
        Command::Check(a) => commands::check_cmd(&resolve(a)?),
        Command::Sigma2(a) => commands::sigma2_cmd(&resolve(a)?),
        Command::Clt(a) => commands::clt_cmd(&resolve(a)?),
        Command::FullReport(a) => commands::full_report_cmd(&resolve(a)?),
        Command::Fm {
            a,
            b,
            regime_weight,
            y_metric,
            dual,
            support_cap,
        } => commands::fm_cmd(a, b, *regime_weight, *y_metric, *support_cap, dual.as_deref()),
    }
}

/// Runs a parsed command line and returns the process exit code:
/// 0 pass, 1 a check or test failed, 2 config error, 3 runtime error.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("config error: --workers must be positive");
            return 2;
        }
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli.command) {
        Ok(Verdict::Pass) => 0,
        Ok(Verdict::Fail) => 1,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
