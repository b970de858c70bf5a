//! Command failures and their exit codes.

use sparsegate::data::DataError;
use sparsegate::infer::InferError;
use sparsegate::model::{CheckpointError, ModelError};
use sparsegate::sparsify::SparsifyError;
use sparsegate::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O or format error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Invalid(msg) => CliError::Usage(msg),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SparsifyError> for CliError {
    fn from(e: SparsifyError) -> Self {
        match e {
            SparsifyError::Invalid(msg) => CliError::Usage(msg),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Penalty(_) | TrainError::Model(_) => CliError::Usage(e.to_string()),
        }
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::OutputMismatch { .. } => CliError::Numeric(e.to_string()),
            InferError::Dimension(_) | InferError::Config(_) => CliError::Usage(e.to_string()),
        }
    }
}
