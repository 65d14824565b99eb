use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// Variant names follow the failure conditions of the individual modules so
/// that callers can match on them directly.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdmError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    DomainError { op: &'static str, msg: String },
    #[error("singular matrix (pivot magnitude {pivot:e})")]
    SingularMatrix { pivot: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any gradient-requiring leaf")]
    DisconnectedTape,
    #[error("row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("row {row} is not on the probability simplex (sum {sum})")]
    NotOnSimplex { row: usize, sum: f64 },
    #[error("{what} = {value} is out of range: {reason}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        reason: String,
    },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("covariance is rank deficient (smallest eigenvalue {min_eigenvalue:e})")]
    RankDeficient { min_eigenvalue: f64 },
    #[error("non-finite value encountered in {0}")]
    NumericalBlowup(String),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("the origin is a singular point of the swirl dynamics (r = {0:e})")]
    OriginSingularity(f64),
    #[error("invalid config: {field}: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for LdmError {
    fn from(e: std::io::Error) -> Self {
        LdmError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LdmError>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> LdmError {
    LdmError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
