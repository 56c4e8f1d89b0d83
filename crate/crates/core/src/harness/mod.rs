//! Synthetic tasks, pruning sweeps, alpha selection and report export.

mod experiment;
mod report;
mod sweep;
pub mod task;

pub use experiment::{
    evaluate_seed, run_experiment, toy_linear_head, ExperimentConfig, ExperimentResult, SeedData, SeedRun,
};
pub use report::{curves_csv, export_reports, mask_file_name, summarize, CellSummary, SeedAlpha, Summary};
pub use sweep::{
    accuracy, alpha_sweep, run_sweep, stability, wauc, AlphaPoint, AlphaSweep, SweepConfig, SweepResult, SweepRow,
};
pub use task::{gen_task, SyntheticTask, TaskKind};
