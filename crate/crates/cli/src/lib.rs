//! Pipeline driver and command-line front end for the IB-FT laboratory.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ExperimentOutcome, SeedResult, StageError};
