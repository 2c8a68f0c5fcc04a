//! Experiment runner behind the `degm` binary: configuration, training,
//! evaluation, bound diagnostics and plot-data export.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::{parse_config, Method, Overrides, RunConfig};
pub use error::{CliError, CliResult};
