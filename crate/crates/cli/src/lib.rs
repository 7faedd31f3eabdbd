//! Command-line surface of the engine: config loading, the `run`, `ablate`
//! and `compare` commands, and their output files.

pub mod commands;
pub mod config;
pub mod emit;
pub mod error;

pub use commands::{ablate, compare, run, Settings};
pub use error::CliError;
