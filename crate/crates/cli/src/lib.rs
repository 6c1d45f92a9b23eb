//! Command-line driver for synthetic data, pretraining, pruning runs,
//! baseline selection, evaluation and reports.

pub mod commands;
pub mod config;
pub mod files;

use std::path::PathBuf;

use vip_core::{Error, Result};

use crate::config::{parse_overrides, RunConfig};

pub const COMMANDS: &[&str] = &["synth", "pretrain", "train-vip", "select", "evaluate", "report"];

/// 2 for bad input, 3 for non-finite numbers.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

/// Runs `command` with `--key value` tokens (and run directories for
/// `report`).
pub fn run(command: &str, tokens: &[String]) -> Result<()> {
    let (file, overrides, positional) = parse_overrides(tokens)?;
    let cfg = RunConfig::load(file.as_deref(), &overrides)?;
    if command != "report" {
        if let Some(p) = positional.first() {
            return Err(Error::Config(format!("unexpected argument {p:?}")));
        }
    }
    match command {
        "synth" => commands::synth(&cfg).map(drop),
        "pretrain" => commands::pretrain(&cfg),
        "train-vip" => commands::train_vip(&cfg).map(drop),
        "select" => commands::select(&cfg).map(drop),
        "evaluate" => commands::evaluate(&cfg).map(drop),
        "report" => {
            let runs: Vec<PathBuf> = positional.iter().map(PathBuf::from).collect();
            commands::report(&cfg, &runs).map(drop)
        }
        other => Err(Error::Config(format!("unknown command {other:?}"))),
    }
}
