//! Error types shared across the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A sample dimension has zero weighted variance, so no bandwidth exists.
    #[error("dimension {dim} has zero weighted variance; cannot set a bandwidth")]
    DegenerateDimension { dim: usize },

    #[error("{context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{context}: need at least {required} samples, got {got}")]
    InsufficientSamples {
        context: &'static str,
        required: usize,
        got: usize,
    },

    #[error("invalid weights: {reason}")]
    InvalidWeights { reason: String },

    /// Every sample weight is zero; no density or update can be formed.
    #[error("all sample weights are zero")]
    WeightCollapse,

    /// The predicted density underflows where the observed density still has
    /// mass, which certifies a predictability violation.
    #[error("predicted density underflows under observed mass at {n} sample(s), first at index {first}", n = .indices.len(), first = .indices.first().copied().unwrap_or(0))]
    PredictedUnderflow { indices: Vec<usize> },

    #[error("measurement {index} has nonpositive noise sigma {sigma}")]
    InvalidNoiseModel { index: usize, sigma: f64 },

    #[error("requested {requested} components but only {achievable} are available")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("predicted covariance is singular")]
    SingularPrediction,

    #[error("forward simulation failed for sample {sample}: {reason}")]
    SimulationFailure { sample: usize, reason: String },

    #[error("time integration produced a non-finite state at t = {time}")]
    IntegrationFailure { time: f64 },

    #[error("linear solve failed: {reason}")]
    SolverFailure { reason: String },

    #[error("sensor {index} lies outside the domain")]
    InvalidSensor { index: usize },

    #[error("packet stream protocol violation: {details}")]
    ProtocolViolation { details: String },

    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    #[error("incompatible checkpoint: {reason}")]
    IncompatibleCheckpoint { reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
