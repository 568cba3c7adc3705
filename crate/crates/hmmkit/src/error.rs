//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, evaluation, and estimation.
#[derive(Debug, Error)]
pub enum HmmError {
    /// A vector or matrix did not have the expected shape.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A linear solve or factorization failed.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Evaluation produced NaN or infinity where a finite value is required.
    #[error("non-finite result: {0}")]
    NonFinite(String),

    /// The observed-information matrix could not be inverted.
    #[error("covariance unavailable: {0}")]
    CovarianceUnavailable(String),

    /// Too many bootstrap refits failed for the percentiles to mean anything.
    #[error("bootstrap unreliable: {0}")]
    BootstrapUnreliable(String),

    /// An exhaustive enumeration was requested on an instance that is too big.
    #[error("instance too large: {0}")]
    TooLarge(String),

    /// A caller-supplied argument is invalid.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The data admit no meaningful answer (e.g. constant series for a grid).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// Every replication of a study was discarded.
    #[error("study degenerate: {0}")]
    StudyDegenerate(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HmmError>;
