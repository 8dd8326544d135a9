//! Manifest parsing and experiment orchestration behind the `openloop` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Experiment, RunConfig};
pub use error::{CliError, CliResult};
