use thiserror::Error;

/// Errors raised by the two-sample testing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid bandwidth: {0}")]
    InvalidBandwidth(f64),

    #[error("too few samples: need at least {needed}, got {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("regularized matrix is near singular (smallest eigenvalue {min_eigenvalue:e})")]
    NearSingular { min_eigenvalue: f64 },

    #[error("inverse square root did not converge (relative residual {residual:e})")]
    InvSqrtResidual { residual: f64 },

    #[error("paired statistic needs equal sample sizes, got {n1} and {n2}")]
    UnsupportedPairing { n1: usize, n2: usize },

    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown test name `{0}`")]
    UnknownTest(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}
