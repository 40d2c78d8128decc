use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("trajectory needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("time step must be positive and finite, got {0}")]
    InvalidTimeStep(f64),

    #[error("non-finite value at sample {row}, component {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("batch length {batch_length} is shorter than two time steps (dt = {dt})")]
    BatchTooShort { batch_length: f64, dt: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance is singular: {0}")]
    SingularCovariance(&'static str),

    #[error("causation entropy {value} is negative beyond sampling tolerance")]
    NegativeEntropy { value: f64 },

    #[error("aggregation already produced a stable pattern")]
    AggregationComplete,

    #[error("design matrix for row {row} is rank deficient over columns [{}]", .columns.join(", "))]
    RankDeficient { row: String, columns: Vec<String> },

    #[error("not enough samples for least squares on row {row}: {samples} samples, {unknowns} unknowns")]
    InsufficientSamples {
        row: String,
        samples: usize,
        unknowns: usize,
    },

    #[error("term {term} of row {row} is not representable in the library")]
    TermNotInLibrary { row: usize, term: String },

    #[error("state became non-finite at t = {time}")]
    BlowUp { time: f64 },

    #[error("covariance lost positive semi-definiteness at step {step} (min eigenvalue {min_eigenvalue})")]
    NotPositiveSemiDefinite { step: usize, min_eigenvalue: f64 },

    #[error("system is not conditionally Gaussian: {0}")]
    NotConditionallyGaussian(String),
}

pub type Result<T> = core::result::Result<T, Error>;
