use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DcnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DcnError {
    /// Shapes, grids or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// Manifest or config validation; lists every offending field.
    #[error("validation error: {}", .fields.join("; "))]
    Validation { fields: Vec<String> },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// No eligible donor for a combination plan. Callers skip the augmentation.
    #[error("planning error: {0}")]
    Planning(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("training aborted at step {step} (batch seed {batch_seed:#018x}): {reason}")]
    TrainingAborted {
        step: u64,
        batch_seed: u64,
        reason: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DcnError {
    pub fn config(msg: impl Into<String>) -> Self {
        DcnError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DcnError::Io {
            path: path.into(),
            source,
        }
    }
}
