use thiserror::Error;

pub type Result<T> = std::result::Result<T, EmError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter at coordinate {coord} (value {value}): {reason}")]
    InvalidParameter {
        coord: usize,
        value: f64,
        reason: &'static str,
    },

    #[error("parameter at coordinate {coord} is on the boundary (value {value}); score is singular")]
    BoundaryParameter { coord: usize, value: f64 },

    #[error("model does not provide capability `{0}`")]
    Unsupported(&'static str),

    #[error("degenerate posterior in M-step: {0}")]
    DegeneratePosterior(String),

    #[error("responsibility underflow for observation {0}")]
    ResponsibilityUnderflow(usize),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("perturbation entry {index} is zero or non-finite")]
    InvalidPerturbation { index: usize },

    #[error("perturbed probe leaves the domain at coordinate {coord} (value {value})")]
    PerturbationOutOfDomain { coord: usize, value: f64 },

    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<EmError>,
    },

    #[error("innovation covariance is singular at time step {t}")]
    FilterSingularity { t: usize },

    #[error("degenerate M-step update: {0}")]
    DegenerateUpdate(String),

    #[error("SEM coordinate {coord} already converged: |theta_t - theta*| = {gap:e}")]
    CoordinateDegenerate { coord: usize, gap: f64 },

    #[error("SEM ratio r[{i}][{j}] did not stabilize within the available iterates")]
    SemNotStable { i: usize, j: usize },

    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),

    #[error("relative error undefined: reference matrix has zero norm")]
    UndefinedMetric,

    #[error("matrix is singular: {0}")]
    SingularMatrix(&'static str),

    #[error("quadrature oracle failed: {0}")]
    OracleFailure(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("EM did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
}

impl EmError {
    pub(crate) fn at_replicate(self, index: usize) -> Self {
        EmError::Replicate {
            index,
            source: Box::new(self),
        }
    }
}
