//! Experiment configuration, pipeline stages, reports and the CLI.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod report;

pub use cli::cli_run;
pub use config::{EvalConfig, ExperimentConfig, SeedConfig, TrainConfig};
pub use report::{export_report, provenance, MetricsReport};
