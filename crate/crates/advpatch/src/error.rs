//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for all toolkit operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two arrays (image vs patch, batch vs vocabulary, ...) do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A patch placement falls outside the host image.
    #[error("placement out of bounds: {0}")]
    Placement(String),

    /// An argument violates a documented precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An encoder backend produced unusable output (NaN, wrong width, ...).
    #[error("backend error: {0}")]
    Backend(String),

    /// The selected backend does not support the requested capability
    /// (typically: gradients are required but unavailable).
    #[error("backend capability missing: {0}")]
    Capability(String),

    /// A metric has an empty denominator and therefore no defined value.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Dataset or video ingestion failed.
    #[error("ingest error: {0}")]
    Ingest(String),

    /// A persisted artifact is corrupt (bad checksum, truncated payload, shape drift).
    #[error("artifact integrity: {0}")]
    Integrity(String),

    /// A persisted artifact declares a format version this build cannot read.
    #[error("artifact version incompatible: {0}")]
    Incompatibility(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
