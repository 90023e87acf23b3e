//! Experiment configuration, repeated-seed suites, reports and self-checks.

pub mod config;
pub mod report;
pub mod selfcheck;
pub mod suite;

pub use config::{parse_methods, DatasetSpec, ExperimentConfig, Method, ModelSettings, Scenario};
pub use report::{format_cell, mean_std, ClientKey, ResultRow, ResultsTable};
pub use suite::{
    aggregate_runs, load_dataset, realize, run_dir, run_method, runs_csv, slug, run_suite, write_reports, write_run_logs, Realization, RunRecord,
    SuiteOptions, SuiteOutcome,
};
pub use selfcheck::{run_checks, CheckResult};
