//! Experiment plumbing shared by the command-line tool: CSV ingestion, JSON
//! configuration and a runner that writes reproducible artifacts.

mod config;
mod dataset;
mod run;

pub use config::{DataSource, ExperimentConfig, GdSettings, Mode, DEFAULT_OUT_DIR, OUT_DIR_ENV};
pub use dataset::{load_csv, Dataset, Split};
pub use run::{read_summary, run_experiment, RunReport};
