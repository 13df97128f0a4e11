//! Experiment orchestration: configs, the training loop, evaluation,
//! multi-seed sweeps and diagnostics.

pub mod compare;
pub mod config;
pub mod diagnostics;
pub mod metrics;
pub mod oracles;
pub mod reference;
pub mod train;

pub use compare::{ablate, run_comparison, ComparisonRow, ComparisonTable, RunRow};
pub use config::RunConfig;
pub use diagnostics::{q_diagnostics_probe, surface_dump, SurfaceRow};
pub use metrics::{MetricRecord, QDiagnostics};
pub use train::{evaluate_policy, run_training, RunStatus, RunSummary, Trainer};
