use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Budgeted variable selection for spatio-temporal forecasting.
///
/// Every command takes `--config FILE` and `--key value` overrides for any
/// configuration key.
#[derive(Parser)]
#[command(name = "vip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Rest {
    /// `--config FILE`, `--key value` overrides, and run directories for `report`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "ARGS")]
    args: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted driver variables
    Synth(Rest),
    /// Train the base forecaster on all variables
    Pretrain(Rest),
    /// Run iterative variable/parameter pruning down to the budget
    TrainVip(Rest),
    /// Pick variables with a baseline heuristic
    Select(Rest),
    /// Score a checkpoint on the validation or test split
    Evaluate(Rest),
    /// Merge run summaries into comparison tables
    Report(Rest),
}

fn main() -> ExitCode {
    vip_tensor::retain_freed_memory();
    let (name, rest) = match Cli::parse().command {
        Command::Synth(r) => ("synth", r),
        Command::Pretrain(r) => ("pretrain", r),
        Command::TrainVip(r) => ("train-vip", r),
        Command::Select(r) => ("select", r),
        Command::Evaluate(r) => ("evaluate", r),
        Command::Report(r) => ("report", r),
    };
    match vip_cli::run(name, &rest.args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vip {name}: {e}");
            ExitCode::from(vip_cli::exit_code(&e))
        }
    }
}
