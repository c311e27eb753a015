//! Library surface of the gprune command-line harness, exposed so
//! integration tests can drive commands in-process.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod errors;
pub mod reports;

pub use config::{load_config, LoadedConfig, Overrides};
pub use errors::{CliError, Result};
