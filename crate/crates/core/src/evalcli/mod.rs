//! Evaluation, persistence and the experiment runner.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod grid;
pub mod metrics;
pub mod robustness;
pub mod runner;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
pub use config::ExperimentConfig;
pub use grid::export_decision_grid;
pub use metrics::{domain_metrics, evaluate, EvalMode, MetricsRecord};
pub use robustness::robustness_consistency;
pub use runner::{run_experiment, run_matrix, run_sweep, RunOutcome, SweepAxis, SweepSpec};
