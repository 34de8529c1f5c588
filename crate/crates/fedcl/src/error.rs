//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not conform for the attempted operation.
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Two parameter vectors have different layouts and cannot be combined.
    #[error("parameter layout mismatch in {context}")]
    LayoutMismatch { context: &'static str },

    /// A vector is too close to zero to normalize.
    #[error("degenerate vector: l2 norm {norm:.3e} below threshold")]
    DegenerateVector { norm: f64 },

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// A configuration key failed validation.
    #[error("invalid config `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    /// A sampling pool was smaller than the requested draw.
    #[error("pool of size {pool} cannot supply {requested} distinct samples")]
    PoolTooSmall { pool: usize, requested: usize },

    /// A contrastive loss was requested with no positive features.
    #[error("contrastive loss requires at least one positive feature")]
    EmptyPositives,

    /// An iterative update failed to reach its target.
    #[error("{context} did not converge within {limit} iterations")]
    IterationLimit { context: &'static str, limit: usize },

    /// A required input collection was empty.
    #[error("{context}: input must not be empty")]
    EmptyInput { context: &'static str },

    /// Malformed serialized data (checkpoints, wire messages, CSV).
    #[error("malformed {what}: {message}")]
    Malformed { what: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
