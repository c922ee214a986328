//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any flowgeo-core operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    #[error("shape mismatch in `{op}`: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation required a scalar (single-element) tensor.
    #[error("`{op}` requires a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    /// Invalid argument outside the shape system (counts, ranges, flags).
    #[error("invalid argument for `{op}`: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A matrix that must be invertible was numerically singular.
    #[error("singular matrix in `{op}` (pivot {pivot:.3e} at index {index})")]
    Singular {
        op: &'static str,
        pivot: f64,
        index: usize,
    },

    /// Malformed external data (IDX files, dataset blobs, ...).
    #[error("data error in `{source_name}` at byte {offset}: {msg}")]
    Data {
        source_name: String,
        offset: usize,
        msg: String,
    },

    /// Checkpoint or config document does not match the expected schema.
    #[error("schema error: expected version {expected}, found {found}: {msg}")]
    Schema {
        expected: String,
        found: String,
        msg: String,
    },

    /// A numeric failure (non-finite loss, failed convergence) that aborts a run.
    #[error("numeric failure in `{op}`: {msg}")]
    Numeric { op: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Numeric { op, msg: msg.into() }
    }
}
