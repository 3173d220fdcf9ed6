//! Library side of the `mnat` command: configuration layering and the
//! subcommand implementations.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{RunConfig, Settings};
pub use error::CliError;
