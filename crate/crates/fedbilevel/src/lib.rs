//! Experiment harness around `fedbilevel-core`: TOML configs, CSV data
//! ingestion, multi-seed runs, sweeps, CSV output and the self-check suite.

pub mod config;
pub mod data;
pub mod executor;
pub mod experiment;
pub mod output;
pub mod sweep;
pub mod verify;

pub use config::ExperimentConfig;
pub use experiment::{run_seeds, setup, Problem, SeedTrace, Setup};
