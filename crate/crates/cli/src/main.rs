//! `qagg`: train, aggregate, conformalize and benchmark multi-level quantile
//! models from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qagg::Error;

#[derive(Parser, Debug)]
#[command(name = "qagg", version, about = "Quantile aggregation, isotonization and conformal calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the data-driven subcommands.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Headered numeric CSV file.
    #[arg(long, value_name = "CSV")]
    pub data: Option<PathBuf>,
    /// Response column in `--data`.
    #[arg(long, default_value = "y")]
    pub target: String,
    /// Built-in synthetic dataset used when `--data` is absent
    /// (linear_gaussian, heteroskedastic, two_regime, heavy_tailed).
    #[arg(long, default_value = "two_regime")]
    pub synthetic: String,
    /// Rows drawn for a synthetic dataset.
    #[arg(long, default_value_t = 2000)]
    pub rows: usize,
    /// Feature columns drawn for a synthetic dataset.
    #[arg(long, default_value_t = 4)]
    pub features: usize,
    /// Seed for drawing a synthetic dataset.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// TOML experiment configuration; unset keys keep their defaults.
    #[arg(long, value_name = "TOML")]
    pub config: Option<PathBuf>,
    /// Run a single seed (overrides the configured seed list).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "qagg-out")]
    pub out_dir: PathBuf,
    /// Number of evenly spaced quantile levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Comma-separated miscoverage levels for coverage reports.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tune and fit the base models; writes base_models.json.
    Train(Common),
    /// Fit an ensemble on out-of-fold base predictions; writes ensemble.json.
    Aggregate {
        #[command(flatten)]
        common: Common,
        /// average, median, qra, dqa or <coarse|medium|fine>_<global|local>.
        #[arg(long, default_value = "dqa")]
        method: String,
    },
    /// Nested CQR-CV+ over an aggregator; writes conformal.csv and intervals.csv.
    Conformalize {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dqa")]
        method: String,
    },
    /// Score a saved ensemble on a dataset; writes predictions.csv and scores.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Ensemble written by `aggregate`.
        #[arg(long, value_name = "JSON")]
        model: PathBuf,
        /// Score every row instead of the model's held-out test split.
        #[arg(long)]
        all_rows: bool,
    },
    /// Full comparison over the configured seeds and methods; writes report.csv and report.json.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Run every built-in synthetic dataset instead of one.
        #[arg(long)]
        all_synthetic: bool,
    },
    /// Probability versus quantile averaging of Gaussians; writes distlab.csv and tails.csv.
    Distlab {
        #[arg(long, default_value = "qagg-out")]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "-1.5,1.5")]
        means: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,0.5")]
        sds: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.5")]
        weights: Vec<f64>,
        /// Keep every n-th level of the 10⁴-point grid.
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
    /// Randomized checks of the scoring and isotonization invariants.
    Proptest {
        #[arg(long, default_value_t = 10_000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) => 1,
        Error::Numerical(_) | Error::Contract(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(common) => commands::train(&common),
        Command::Aggregate { common, method } => commands::aggregate(&common, &method),
        Command::Conformalize { common, method } => commands::conformalize(&common, &method),
        Command::Evaluate { common, model, all_rows } => commands::evaluate(&common, &model, all_rows),
        Command::Benchmark { common, all_synthetic } => commands::benchmark(&common, all_synthetic),
        Command::Distlab {
            out_dir,
            means,
            sds,
            weights,
            stride,
        } => commands::distlab(&out_dir, &means, &sds, &weights, stride),
        Command::Proptest { cases, seed } => commands::proptest(cases, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
