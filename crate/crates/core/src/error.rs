use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: split `{split}` received zero rows (n = {n})")]
    InsufficientData { split: &'static str, n: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite input: {what}")]
    NonFinite { what: &'static str },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty score set: at least one conformity score is required")]
    EmptyScores,

    #[error("empty pooling region: no calibration points within diameter {xi}")]
    EmptyPoolingRegion { xi: f64 },

    #[error("pooling count {m} exceeds available calibration points ({available})")]
    PoolingCountTooLarge { m: usize, available: usize },

    #[error("degenerate tree: min_leaf {min_leaf} exceeds sample count {n}")]
    DegenerateTree { min_leaf: usize, n: usize },

    #[error("no crossing: g(0) = {at_zero:.6e}, g({delta_max:.3e}) = {at_max:.6e}")]
    NoCrossing {
        at_zero: f64,
        at_max: f64,
        delta_max: f64,
    },

    #[error("interval escapes (0,1): z = {z:.6e} at alpha = {alpha}")]
    IntervalEscapes { z: f64, alpha: f64 },

    #[error("no feasible candidate: {0}")]
    NoFeasibleCandidate(String),

    #[error(
        "eta undefined: every per-point loss in the denominator was zero and no override was given"
    )]
    EtaUndefined,

    #[error("csv: {0}")]
    Csv(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
