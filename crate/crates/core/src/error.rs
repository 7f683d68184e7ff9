//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A construction parameter would blow up memory or component counts.
    #[error("capacity: {0}")]
    Capacity(String),

    /// A domain-type invariant was violated (SPD covariance, weight sums, ...).
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Degenerate construction input (zero pooled variance, empty mixture, ...).
    #[error("construction: {0}")]
    Construction(String),

    /// A quadrature grid is too coarse for the requested estimate.
    #[error("grid resolution: {0}")]
    Resolution(String),

    /// An argument is outside the mathematical domain of an operation.
    #[error("domain: {0}")]
    Domain(String),

    /// A loss, gradient, or sampler state stopped being finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Configuration rejected before any compute started.
    #[error("config: {0}")]
    Config(String),

    /// A checkpoint or world file has the wrong magic, version, or shape.
    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
