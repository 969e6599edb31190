//! Experiment orchestration behind the `cmm` binary: config parsing with
//! fully materialized defaults, seeded experiment execution, and report
//! emission. Everything here is deterministic given a resolved config.

pub mod config;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, ExperimentSpec};
pub use report::{read_results_csv, RunReport};
pub use run::{diagnose, execute, DiagnoseArgs};
