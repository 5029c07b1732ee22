//! Experiment runner: configs, training recipes, gradient checks, metrics
//! export and sweeps.

mod config;
mod gradcheck;
mod metrics;
mod sweep;
mod train;
mod trend;

pub use config::{
    apply_override, DataFormat, DatasetConfig, ExperimentConfig, ModelConfig, OptimConfig, Recipe, TeacherConfig,
    TeacherSource,
};
pub use gradcheck::{gradcheck, gradcheck_trainer, GradcheckReport, FD_STEP, GRADCHECK_TOL};
pub use metrics::{
    export_metrics, mean_std, read_metrics, ExportReport, GroupSummary, MetricsRow, TimingRow, METRICS_HEADER,
};
pub use sweep::{expand_sweep, sweep, SweepConfig, SweepPoint};
pub use train::{eval_checkpoint, run, run_with, top1, BatchLoss, Components, EpochStats, RunSummary, Teacher, Trainer};
pub use trend::{recipe_means, run_trend, TrendPlan};
