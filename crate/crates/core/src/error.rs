use thiserror::Error;

/// Every failure the engine can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("duplicate cell (region {region}, cause {cause}, age {age}, gender {gender}, month {month})")]
    DuplicateCell {
        region: usize,
        cause: usize,
        age: usize,
        gender: usize,
        month: usize,
    },
    #[error("missing cell (region {region}, cause {cause}, age {age}, gender {gender}, month {month})")]
    MissingCell {
        region: usize,
        cause: usize,
        age: usize,
        gender: usize,
        month: usize,
    },
    #[error("record {index}: offset must be strictly positive")]
    NonPositiveOffset { index: usize },
    #[error("region {region}, month {month}: stringency differs between records")]
    StringencyMismatch { region: usize, month: usize },
    #[error("record {index}: {what}")]
    InvalidRecord { index: usize, what: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("spline needs at least 3 knots, got {0}")]
    KnotCountTooSmall(usize),
    #[error("knots must be strictly increasing")]
    NonIncreasingKnots,
    #[error("no covariate values supplied")]
    EmptyInput,
    #[error("covariate `{0}` is constant; spline basis would be degenerate")]
    DegenerateCovariate(String),
    #[error("by-factor smooth needs at least two levels")]
    SingleLevelFactor,
    #[error("invalid smooth specification: {0}")]
    InvalidSmoothSpec(String),

    #[error("autoregressive coefficient {value} at coordinate {index} outside (-1, 1)")]
    PhiOutOfRange { index: usize, value: f64 },
    #[error("Wishart degrees of freedom {delta} must exceed dimension - 1 = {min}")]
    DegreesOfFreedomTooSmall { delta: f64, min: f64 },
    #[error("coordinate {index} out of range (size {size})")]
    CoordOutOfRange { index: usize, size: usize },
    #[error("invalid prior configuration: {0}")]
    InvalidPrior(String),
    #[error("invalid variational state: {0}")]
    InvalidState(String),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),

    #[error("linear predictor exponent {0} exceeds overflow guard")]
    NumericOverflow(f64),
    #[error("Cholesky factorization failed: {0}")]
    CholeskyFailure(String),
    #[error("Newton Hessian could not be factorized")]
    HessianFactorizationFailure,
    #[error("line search stalled: {0}")]
    LineSearchStall(String),
    #[error("singular linear system: {0}")]
    SingularSystem(String),
    #[error("Poisson rate {0} exceeds simulation limit")]
    RateOverflow(f64),
    #[error("dense instantiation of dimension {0} exceeds the oracle limit")]
    DimensionTooLarge(usize),
    #[error("function evaluation not finite at coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error("scale matrix is singular")]
    SingularScale,
    #[error("unknown smooth `{0}`")]
    UnknownSmooth(String),
    #[error("fit aborted after {} recorded sweeps: {message}", elbo_trace.len())]
    FitAborted { message: String, elbo_trace: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, Error>;
