//! Config-driven experiments: synthetic data, models assembled from entangled
//! blocks, training loops, sweeps, the built-in invariant suite and the CLI.

pub mod check;
pub mod cli;
pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod train;

pub use config::{ExperimentConfig, ModelKind, OptimizerConfig, Task};
pub use data::{gen_dataset, Dataset};
pub use model::Model;
pub use train::{sweep, train, EpochMetrics, RunMetrics, RunStatus, SweepResult};
