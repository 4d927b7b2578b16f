//! Experiment runner: sweeps over arm length, traffic level and source rate,
//! written out as CSV tables plus a plain-text summary.

pub mod config;
pub mod experiment;
pub mod output;

pub use config::{ExperimentConfig, Scenario};
pub use experiment::{run_experiment, ExperimentOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Sim(#[from] fiberqkd::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
