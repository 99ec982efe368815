//! Error type shared by all toolkit modules.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor/matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The architecture cannot produce a valid feature map (e.g. a pooling
    /// stage would collapse a spatial dimension below 1).
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    /// Bad numeric input: non-finite values, empty sets, out-of-range labels.
    #[error("invalid input: {0}")]
    Input(String),

    /// A dataset file is malformed (wrong magic, truncated, bad header).
    #[error("format error: {0}")]
    Format(String),

    /// Dataset split cannot be performed as requested.
    #[error("split error: {0}")]
    Split(String),

    /// Factorization failed even after jitter escalation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Output-layer refinement diverged; `last_weights` holds the final
    /// finite state (row-major n_features x n_classes).
    #[error("refinement diverged at epoch {epoch}, batch {batch}")]
    RefineDiverged {
        epoch: usize,
        batch: usize,
        last_weights: Box<ndarray::Array2<f64>>,
    },

    /// Every trial of a random search failed.
    #[error("search failed: {0}")]
    Search(String),

    /// Model file does not start with the `LBCN` magic.
    #[error("not a model file: bad magic")]
    BadMagic,

    /// Model file has a format version this build cannot read.
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),

    /// Stored CRC-32 does not match the file contents.
    #[error("model file checksum mismatch")]
    ChecksumMismatch,

    /// Model file ends before the layout declared in its header.
    #[error("model file truncated: {0}")]
    Truncated(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("header error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code class: 3 for data/format problems, 4 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::RefineDiverged { .. } | Error::Search(_) => 4,
            _ => 3,
        }
    }
}
