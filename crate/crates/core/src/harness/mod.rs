//! Configuration, orchestration, metrics and verification suites.

pub mod config;
pub mod data;
pub mod metrics;
pub mod sweep;
pub mod train;
pub mod verify;

pub use config::ExperimentConfig;
pub use metrics::MetricsReport;
pub use train::{run, run_seed, run_with_data};
