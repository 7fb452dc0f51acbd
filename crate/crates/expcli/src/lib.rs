//! Experiment tooling for `fedsim-core`: seeded synthetic datasets, the
//! dataset container format, TOML experiment configs, the run driver and
//! the cohort-scaling benchmark.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod synthetic;

pub use config::ExperimentConfig;
pub use error::{ExpError, Result};
pub use experiment::Experiment;
