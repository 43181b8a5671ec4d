use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index covariate is constant (range {range}); the term is unidentifiable")]
    DegenerateIndex { range: f64 },

    #[error("observation {index} (u = {value}) lies outside the inner knot span [{lower}, {upper}]")]
    OutOfSpan {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("invalid basis configuration: {0}")]
    InvalidBasis(String),

    #[error("difference order {dif} must satisfy 1 <= dif < q = {q}")]
    InvalidDifference { q: usize, dif: usize },

    #[error("smoothing parameter {index} must be positive, got {value}")]
    NonPositiveLambda { index: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mean {value} at observation {index} is outside the valid domain of the {family} family")]
    InvalidMean {
        index: usize,
        value: f64,
        family: &'static str,
    },

    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("invalid model specification: {0}")]
    Spec(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("no admissible single-index starting values after {0} draws")]
    InitFailed(usize),

    #[error("no usable iterate after {iterations} iterations ({restarts} restarts)")]
    NonConvergence { iterations: usize, restarts: usize },
}
