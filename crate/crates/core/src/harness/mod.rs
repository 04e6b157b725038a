//! Experiment harness: TOML configs, grid expansion, repeated runs and trend
//! tables.

mod config;
mod report;
mod run;

pub use config::{
    AttackSection, DatasetSpec, ExperimentConfig, FederationSection, GridSection, Knowledge,
    Method, ModelSection, SplitConfig, CONFIG_VERSION,
};
pub use report::{read_rows_csv, trend_report, write_rows_csv, Axis, TrendReport};
pub use run::{
    prepare_run, run_attacks, run_experiment, run_grid, ExperimentOutput, PreparedRun, ResultRow,
    RunRecord,
};

use thiserror::Error;

use crate::attacks::AttackError;
use crate::dataio::DataError;
use crate::fedsim::FedError;
use crate::mia::MiaError;

/// Default directory for experiment outputs when `ARA_OUTPUT_DIR` is unset.
pub const DEFAULT_OUTPUT_DIR: &str = "ara-output";
pub const OUTPUT_DIR_ENV: &str = "ARA_OUTPUT_DIR";

/// Output directory from `ARA_OUTPUT_DIR`, falling back to `ara-output`.
pub fn output_dir() -> std::path::PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(Into::into)
        .unwrap_or_else(|| DEFAULT_OUTPUT_DIR.into())
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Mia(#[from] MiaError),
    #[error("{path}: {message}")]
    Output { path: String, message: String },
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::Data(DataError::InsufficientRows { .. })
            | HarnessError::Data(DataError::InfeasibleMarginal { .. })
            | HarnessError::Fed(FedError::Config(_))
            | HarnessError::Fed(FedError::WindowTooLong { .. })
            | HarnessError::Attack(AttackError::Problem(_)) => 2,
            HarnessError::Fed(FedError::Diverged { .. })
            | HarnessError::Attack(AttackError::NonFinite { .. })
            | HarnessError::Attack(AttackError::Fed(FedError::Diverged { .. })) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
