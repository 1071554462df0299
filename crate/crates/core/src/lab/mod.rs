//! Experiment runner plumbing: configs, checkpoints, CSV reports, plots.

pub mod checkpoint;
pub mod config;
pub mod plot;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, ExperimentKind};
pub use runner::{run, RunControl, Session};
