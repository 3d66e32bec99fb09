//! Configuration, run directories, manifests and the experiment driver
//! behind the `semadv` command line.

pub mod config;
pub mod experiment;
pub mod image_io;
pub mod manifest;
pub mod report;

pub use config::{Config, ExperimentConfig, Mode};
pub use experiment::{replay, run_config, run_experiment, Replay, RunSummary};
pub use manifest::RunManifest;
pub use report::{evaluate_runs, render_report, ReportRow};
