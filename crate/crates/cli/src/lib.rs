//! Command-line driver: experiment configs, the results store, command
//! implementations and table reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod store;

pub use config::ExperimentConfig;
pub use error::{CliError, EXIT_OK, EXIT_TRAINING, EXIT_VALIDATION};
pub use store::{ResultRow, ResultsStore, RunKind};
