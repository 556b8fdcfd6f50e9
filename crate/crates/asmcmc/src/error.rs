use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("all log weights are -inf; the weight set is degenerate")]
    DegenerateWeights,

    #[error("SMC weights degenerate at stage {stage}")]
    DegenerateSmc { stage: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("active dimension {active_dim} out of range for dimension {dim}")]
    ActiveDimOutOfRange { active_dim: usize, dim: usize },

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("eigenvalue {value:e} is negative beyond tolerance; gradient matrix is broken")]
    NegativeEigenvalue { value: f64 },

    #[error("non-finite gradient at prior sample {index}: {point:?}")]
    NonFiniteGradient { index: usize, point: Vec<f64> },

    #[error("weights do not sum to 1 (sum = {sum}) or contain negative entries")]
    InvalidWeights { sum: f64 },

    #[error("proposal density is zero at a sampled point (support violation)")]
    ProposalSupportViolation,

    #[error("conditional SMC needs at least 2 particles, got {0}")]
    TooFewParticles(usize),

    #[error("chain trace is empty")]
    EmptyTrace,

    #[error("initial state has non-finite target density")]
    InvalidInit,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
