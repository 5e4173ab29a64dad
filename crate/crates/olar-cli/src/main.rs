//! Benchmark CLI: generate synthetic streams, run the online active
//! regression pipelines in guarantee or budget mode, and sweep budgets
//! against baselines into a CSV report.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

mod report;
mod runner;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "olar", version, about = "Online active lp regression benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (binary stream + manifest).
    Gen(GenArgs),
    /// Run one pipeline on a dataset and print a JSON result.
    Run(RunArgs),
    /// Sweep budgets x methods x trials into a CSV report.
    Sweep(SweepArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    d: u32,
    #[arg(long)]
    p: f64,
    /// Label noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Rows inflated by n^(1/p); defaults to d.
    #[arg(long)]
    inflate: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Dataset path (.olar binary stream or CSV with trailing label column).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// guarantee | budget
    #[arg(long, default_value = "guarantee")]
    mode: String,
    /// Query cap; required when --mode budget.
    #[arg(long)]
    budget: Option<u64>,
    /// exact-oracle | compression-tree | leverage-fast
    #[arg(long)]
    weight_mode: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Boosting runs (log(1/δ)-style repetition with validation selection).
    #[arg(long, default_value_t = 1)]
    boost: usize,
    /// key=value configuration file; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    p: f64,
    /// Comma-separated subset of: active-online, uniform, offline-active-like.
    #[arg(long, default_value = "active-online,uniform")]
    methods: String,
    /// Comma-separated budgets; plain counts or percentages like "8%".
    #[arg(long, default_value = "8%,10%,12%,14%")]
    budgets: String,
    #[arg(long, default_value_t = 20)]
    trials: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => runner::generate(args),
        Command::Run(args) => runner::run(args),
        Command::Sweep(args) => runner::sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

