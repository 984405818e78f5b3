//! Experiment harness: synthetic data, missing-pattern protocol, training,
//! evaluation, sweeps and the gradient suite.

pub mod config;
pub mod gradsuite;
pub mod metrics;
pub mod missing;
pub mod sweep;
pub mod synthetic;
pub mod train;

pub use config::{ExperimentConfig, MissingType};
pub use train::{evaluate, run_experiment, train, MetricsReport, RunOutcome};
