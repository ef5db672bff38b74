//! Experiment orchestration for the `prunelab` command-line tool: TOML
//! configuration, one runner per experiment, the inference-speed benchmark
//! (Table 3 analog), run manifests and report rendering.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod report;
pub mod speed;

use thiserror::Error;

use prunelab::importance::ImportanceError;
use prunelab::model::ModelError;
use prunelab::pruning::PruningError;
use prunelab::stats::StatsError;

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiments::run;
pub use manifest::Manifest;
pub use report::emit_report;
pub use report::ReportStatus;
pub use speed::{speed_benchmark, SpeedReport, SpeedRow, Throughput};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_MISSING_INPUT: i32 = 3;
    pub const EXIT_RUNTIME: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::MissingInput(_) => Self::EXIT_MISSING_INPUT,
            CliError::Runtime(_) => Self::EXIT_RUNTIME,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::MissingCheckpoint(p) => CliError::MissingInput(format!("checkpoint {p}")),
            ModelError::InvalidConfig(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ImportanceError> for CliError {
    fn from(e: ImportanceError) -> Self {
        match e {
            ImportanceError::Model(m) => m.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<PruningError> for CliError {
    fn from(e: PruningError) -> Self {
        match e {
            PruningError::Model(m) => m.into(),
            PruningError::Importance(i) => i.into(),
            PruningError::InvalidIncrement(_) | PruningError::AbsentKind(_) | PruningError::NoSuchLayer { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error: {e}"))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
