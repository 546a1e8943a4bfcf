//! Crate-wide error type.

/// Errors surfaced by the numeric kernel, cells, generators, and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A non-finite value appeared during a rollout.
    #[error("non-finite value at sequence {seq}, step {step}")]
    NonFinite { seq: usize, step: usize },

    /// A metric is undefined for the given inputs (e.g. single-class AUC).
    #[error("metric undefined: {0}")]
    Metric(String),

    /// Training produced a non-finite loss and was halted.
    #[error("training diverged at epoch {epoch}, optimizer step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (dataset, checkpoint, config).
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Re-tag a rollout error with the batch-level sequence index.
    pub fn with_seq(self, seq: usize) -> Self {
        match self {
            Error::NonFinite { step, .. } => Error::NonFinite { seq, step },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
