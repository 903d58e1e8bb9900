//! Experiment orchestration: toy text tasks, persisted runs, ablation
//! sweeps, theory verification and training curves.

mod curves;
mod run;
mod sweep;
mod task;
mod verify;

pub use curves::{collect_curves, curves_csv, curves_svg, find_runs, median_curve, Curve};
pub use run::{
    read_metrics, replay_matches, runs_root, summarize, train_run, MetricsRow, RunConfig,
    RunOutcome, RunSummary, METRICS_HEADER, THRESHOLD_FRACTION, TRAILING_WINDOW,
};
pub use sweep::{
    aggregate_cell, aggregate_csv, median_updates, run_sweep, value_label, CellReport, SweepAxis,
    SweepReport, SweepSpec,
};
pub use task::{Compose, TaskSpec, TextTask};
pub use verify::{
    verify_theory, InstanceReport, ProblemSpec, PropertyCheck, ReferenceSpec, RewardSpec,
    VerificationReport,
};
