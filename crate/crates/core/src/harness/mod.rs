//! Configuration, dataset preparation, seeded experiment runs and reports.

pub mod config;
pub mod report;
pub mod run;

pub use config::{apply_override, resolve_task, ExperimentConfig, ExperimentKind};
pub use report::{aggregate, plot_rows, write_report, AggregateRow, PlotRow};
pub use run::{
    be_model, member_inits, prepare, rerun_from_manifest, run_experiment, shuffle_seeds, worker_count, Prepared, RunEntry,
    RunManifest, RunOutcome, WORKERS_ENV,
};
