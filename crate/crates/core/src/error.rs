use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of length {len} exceeds decoder context {limit}")]
    Capacity { len: usize, limit: usize },
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("{0}")]
    Contract(String),
    #[error("support loss diverged at inner step {step}{}", task.map(|t| format!(" (task {t})")).unwrap_or_default())]
    Divergence { step: usize, task: Option<usize> },
    #[error("incompatible input: {0}")]
    Compatibility(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
