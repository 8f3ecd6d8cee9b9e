//! Config parsing and run orchestration behind the `postpred` binary.

pub mod config;
pub mod run;

pub use config::{load_config, parse_config, ConfigErrors, Experiment, ExperimentKind};
pub use run::{execute, run_to_dir, Metrics, RunOutcome};
