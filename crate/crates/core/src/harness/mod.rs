//! End-to-end orchestration: data, fit, uncertainty, backoffs, tubes,
//! closed-loop Monte Carlo, and the reports built from them.

mod baseline;
pub mod commands;
pub mod config;
mod montecarlo;
mod pipeline;
mod sensitivity;
pub mod svg;

use thiserror::Error;

pub use baseline::{robust_backoffs, robust_baseline, RobustBaseline};
pub use config::{ExperimentConfig, SensitivityConfig};
pub use montecarlo::{
    aggregate, check_report, quantile, run_montecarlo, simulate_run, write_montecarlo, AcceptanceThresholds, CheckLine,
    MonteCarloReport, RunRecord,
};
pub use pipeline::{run_pipeline, Bundle, ErrorSummary, TrainingSummary};
pub use sensitivity::{run_sensitivity, SensitivityTable};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

impl HarnessError {
    pub fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        Self::Stage { stage, message: e.to_string() }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Stage { .. } | Self::Io(_) => 3,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io(crate::io::IoError::Io { path: path.display().to_string(), source })
}
