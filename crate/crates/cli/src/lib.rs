//! Experiment harness behind the `ddlab` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{Experiment, Overrides};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
