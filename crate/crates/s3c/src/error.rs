//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, inference, learning, and I/O.
#[derive(Debug, Error)]
pub enum S3cError {
    /// Shapes of two related quantities disagree.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A configuration value is outside its admissible range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A numeric update produced NaN or infinity.
    #[error("non-finite value encountered in {context} at iteration {iteration}")]
    NonFinite {
        context: &'static str,
        iteration: usize,
    },

    /// Exact enumeration requested for a model above the pattern limit.
    #[error("hidden dimension {n_hidden} exceeds the enumeration limit {limit}")]
    EnumerationLimit { n_hidden: usize, limit: usize },

    /// A per-pattern marginal covariance could not be factorized.
    #[error("singular covariance while evaluating spike pattern {pattern:#b}")]
    SingularCovariance { pattern: u64 },

    /// An eigendecomposition failed to converge.
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    /// A file did not conform to its expected binary or text layout.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, S3cError>;

impl S3cError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        S3cError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        S3cError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
