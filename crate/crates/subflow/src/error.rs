use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    /// Integration produced a NaN or infinite state component.
    #[error("non-finite state encountered during integration (subinterval {step})")]
    NonFiniteState { step: usize },

    /// An operation needed a Lipschitz/growth hint the system does not carry.
    #[error("control system has no Lipschitz/sub-linear-growth hint")]
    MissingHint,

    /// Grid too coarse for the requested difference order.
    #[error("grid of {n} subintervals is too coarse for order-{order} differences")]
    GridTooCoarse { n: usize, order: usize },

    /// Not enough usable trace points to fit a decay exponent.
    #[error("insufficient decay data: {found} usable points, need at least {needed}")]
    InsufficientDecay { found: usize, needed: usize },

    /// Iterative eigensolver hit its iteration cap.
    #[error("eigensolver did not converge within {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Backtracking exhausted the reject budget; gradient and cost disagree.
    #[error("flow stalled: {rejects} consecutive step rejections at t = {t:.6e}")]
    Stall { rejects: usize, t: f64 },

    /// A linear solve on a supposedly definite matrix failed.
    #[error("singular linear solve in closed-form oracle")]
    SingularSolve,

    /// Config referenced a built-in system that does not exist.
    #[error("unknown built-in system `{0}`")]
    UnknownSystem(String),

    /// Polynomial field tables are dimensionally inconsistent.
    #[error("malformed polynomial specification: {0}")]
    MalformedPolynomial(String),

    /// Fewer result rows than the operation needs.
    #[error("operation needs at least {needed} rows, got {found}")]
    InsufficientRows { found: usize, needed: usize },

    /// Config document is not valid JSON.
    #[error("config parse error: {0}")]
    Parse(String),

    /// Config parsed but a field is invalid; `field` names the offender.
    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
