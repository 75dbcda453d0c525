use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum FrnError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("unknown operation `{0}`")]
    UnknownOp(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} in {path}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("declared dimensions {dims:?} in {path} overflow the addressable size")]
    DimensionOverflow { path: PathBuf, dims: Vec<u64> },

    #[error("malformed data in {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(
        "non-finite loss at step {step} (lr {lr:.3e}, grad-norm {grad_norm:.3e})"
    )]
    NonFiniteLoss { step: u64, lr: f64, grad_norm: f64 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FrnError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        FrnError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FrnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = FrnError> = std::result::Result<T, E>;
