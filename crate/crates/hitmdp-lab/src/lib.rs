//! Experiment runner, file formats and CLI plumbing around
//! [`hitmdp_core`]: config-driven agent training, tabular solves,
//! homomorphism checks and cold-start training, all seeded and
//! byte-reproducible.

pub mod config;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod runner;

pub use config::{Command, ExperimentConfig};
pub use error::LabError;
