//! Experiment driver for routed adapter inventories: configuration,
//! checkpoints, result tables and the five subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod output;

pub use error::{CliError, CliResult};
