//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A requested size exceeds a hard capacity bound.
    #[error("capacity exceeded for {what}: requested {requested}, limit {limit}")]
    Capacity {
        what: &'static str,
        requested: u64,
        limit: u64,
    },

    #[error("level {level} out of range (max {max})")]
    LevelOutOfRange { level: usize, max: usize },

    #[error("level mismatch: expected {expected}, got {got}")]
    LevelMismatch { expected: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("value count mismatch at level {level}: expected {expected}, got {got}")]
    LengthMismatch {
        level: usize,
        expected: usize,
        got: usize,
    },

    /// Density positivity bound `|phi|*sqrt(dt) < 1` violated.
    #[error(
        "density positivity violated at level {level}, node {node}: \
         |{kernel}|*sqrt(dt) = {product} >= 1"
    )]
    DensityPositivity {
        level: usize,
        node: usize,
        kernel: f64,
        product: f64,
    },

    #[error("non-finite {what} at level {level}, node {node}")]
    NonFinite {
        what: &'static str,
        level: usize,
        node: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("risk envelope failed validation: {0}")]
    EnvelopeValidation(String),

    #[error("operation {op} does not support envelope kind {kind}")]
    UnsupportedEnvelope { op: &'static str, kind: String },

    #[error("enumeration size {size} exceeds bound {limit}")]
    EnumerationBound { size: u64, limit: u64 },

    /// Recorder weight family cannot represent a deviation measure.
    #[error(
        "recorder weights violate positivity at level {level}, node {node}: \
         min {min}, max {max} (need min <= 0 <= max)"
    )]
    RecorderPositivity {
        level: usize,
        node: usize,
        min: f64,
        max: f64,
    },

    #[error("singular regression at step {step}: condition estimate {condition:e}")]
    SingularRegression { step: usize, condition: f64 },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("empty series")]
    EmptySeries,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
