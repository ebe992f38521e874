use thiserror::Error;

/// Errors raised anywhere in the prognostics pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("line {line}: unknown step_type {value:?}")]
    UnknownStepType { line: u64, value: String },

    #[error("line {line}: test time decreases within a step ({previous} s -> {current} s)")]
    NonMonotoneTime { line: u64, previous: f64, current: f64 },

    #[error("line {line}: voltage {voltage} V outside [{lo}, {hi}] V for cell {cell_id}")]
    VoltageOutOfRange {
        line: u64,
        cell_id: String,
        voltage: f64,
        lo: f64,
        hi: f64,
    },

    #[error("metadata: {0}")]
    Metadata(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("cycle {cycle_index} has no CC {direction} segment")]
    NoCcSegment { cycle_index: u32, direction: String },

    #[error("{0}: logarithm of a zero magnitude")]
    ZeroMagnitude(&'static str),

    #[error("end of life is censored at {0} Ah")]
    CensoredEol(f64),

    #[error("{0}")]
    ZeroVariance(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("singular linear system")]
    Singular,

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
