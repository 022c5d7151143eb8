use thiserror::Error;

use crate::ndtensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// A non-finite value appeared; `location` names the layer or parameter.
    #[error("numerical divergence at {location}: {detail}")]
    Divergence { location: String, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("malformed dataset at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn divergence(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Divergence {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
