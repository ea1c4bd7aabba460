use thiserror::Error;

/// Errors raised by mesh construction, assembly, solves, training and runs.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KsError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("zero cell count: nx={nx}, ny={ny}")]
    ZeroCount { nx: usize, ny: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("singular kinetic term: prediction {value} at cell {cell} is too close to -1")]
    SingularKinetic { cell: usize, value: f64 },
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("iterative solver did not converge in {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("normalizer has not been fitted")]
    UnfittedNormalizer,
    #[error("non-finite value encountered during {0}")]
    NonFinite(String),
    #[error("invalid integrator state: {0}")]
    InvalidState(String),
    #[error("reference norm is zero")]
    ZeroReference,
    #[error("non-positive error value {0} in convergence data")]
    NonPositiveError(f64),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("time step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<KsError>,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for KsError {
    fn from(e: std::io::Error) -> Self {
        KsError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KsError>;
