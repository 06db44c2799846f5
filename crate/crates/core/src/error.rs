//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands (or an operand and a model) disagree on length/shape.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An operation received an empty collection where at least one element
    /// is required.
    #[error("empty input in {0}")]
    EmptyInput(&'static str),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// A network description violates its structural invariants.
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    /// A run/training configuration violates its invariants.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A direction vector is zero (or all candidates are), so no descent
    /// direction can be produced.
    #[error("degenerate direction in {0}: zero vector")]
    DegenerateDirection(&'static str),

    /// The line search was handed a direction with a non-negative
    /// directional derivative.
    #[error("line search requires a descent direction (g'd < 0), got g'd = {0}")]
    NonDescentDirection(f64),

    /// A class label is outside the valid range for the dataset/network.
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// A worker failed; the shard index is attached for diagnosis.
    #[error("worker for shard {shard} failed: {source}")]
    Worker {
        shard: usize,
        #[source]
        source: Box<Error>,
    },

    /// Filesystem-level failure (missing file, short read, ...).
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists and is readable but its contents are not what the
    /// format requires (bad magic, inconsistent counts, ...).
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}
