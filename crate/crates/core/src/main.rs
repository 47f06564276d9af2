use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fu_incentive::report::{run, Mode, RunRequest};

/// Federated unlearning incentive simulator.
#[derive(Debug, Parser)]
#[command(name = "fu-incentive", version)]
struct Cli {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Report JSON path; the per-client CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed_override: Option<u64>,
    /// Outer-loop stopping tolerance on payment change.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    budget_override: Option<f64>,
    /// Grid resolution used by the oracle suite.
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    quiet: bool,
    /// Comma-separated payments for `--mode nash` (default: all zero).
    #[arg(long, value_delimiter = ',')]
    payments: Option<Vec<f64>>,
    /// Config field varied by `--mode sweep` (default: dirichlet_beta).
    #[arg(long)]
    sweep_key: Option<String>,
    /// Comma-separated values for the swept field (default: 0.2,0.5,0.8).
    #[arg(long, value_delimiter = ',')]
    sweep_values: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let req = RunRequest {
        mode: cli.mode,
        config_path: cli.config,
        out_path: cli.out,
        payment_override: cli.payments,
        sweep_key: cli.sweep_key,
        sweep_values: cli.sweep_values,
        seed_override: cli.seed_override,
        epsilon: cli.epsilon,
        budget_override: cli.budget_override,
        grid_points: cli.grid_points,
        quiet: cli.quiet,
    };
    ExitCode::from(run(&req) as u8)
}
