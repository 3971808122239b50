//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed row in a text stream; `line` is 1-based and counts the header.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty trace")]
    EmptyTrace,

    #[error("out-of-order sample: expected index {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },

    #[error("malformed wavelet: {0}")]
    MalformedWavelet(String),

    #[error("undefined correlation for zero-variance input")]
    ZeroVariance,

    #[error("input too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("wavelet buffer is empty")]
    EmptyBuffer,

    #[error("non-finite value {value} for feature {feature}")]
    NonFinite { feature: &'static str, value: f64 },

    #[error("degenerate thresholds for feature {feature}: lower {lt} >= upper {ut}")]
    DegenerateThresholds { feature: &'static str, lt: f64, ut: f64 },

    #[error("incomplete training: {phase} phase got {got} of {need} required candidates")]
    IncompleteTraining { phase: &'static str, got: usize, need: usize },

    #[error("insufficient statistics: {0}")]
    InsufficientStats(String),

    #[error("memory budget exceeded for {owner}: need {needed} bytes, {available} available")]
    BudgetExceeded { owner: String, needed: usize, available: usize },

    #[error("capacity: {0}")]
    Capacity(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("model version {found:?} unsupported (expected {expected:?})")]
    ModelVersion { found: String, expected: String },

    #[error("model checksum mismatch")]
    ChecksumMismatch,

    #[error("model/run mismatch: {0}")]
    Mismatch(String),

    #[error("non-monotone timestamp: {got} s after {prev} s")]
    NonMonotoneTime { prev: f64, got: f64 },

    #[error("event span [{start}, {end}] overlaps no label span")]
    UnlabeledEvent { start: u64, end: u64 },

    #[error("simulation: {0}")]
    Simulation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
