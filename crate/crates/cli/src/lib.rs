//! Command-line driver for the generate → train → evaluate pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;
pub mod sweep;

pub use commands::{dispatch, Cli};
pub use config::{RunConfig, SEED_ENV};
pub use error::{CliError, CliResult};
