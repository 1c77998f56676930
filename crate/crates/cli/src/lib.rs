//! Library side of the `bgmd` command: config files, runs, sweeps and the
//! GM and bench utilities.

pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::CliError;
