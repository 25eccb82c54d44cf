//! Batch front end: configs in, deterministic reports out.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{run, RunError};
pub use config::{parse_config, ConfigError, RunConfig};
