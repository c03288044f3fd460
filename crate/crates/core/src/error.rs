use thiserror::Error;

/// Errors shared across the laboratory's modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not symmetric: max asymmetry {asymmetry:.3e} exceeds tolerance {tolerance:.3e}")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error(
        "significantly negative eigenvalue {value:.6e} (threshold {threshold:.3e}); input is not a covariance matrix"
    )]
    NegativeEigenvalue { value: f64, threshold: f64 },

    #[error("zero eigenvalue in direction {index}: cannot whiten a degenerate spectrum")]
    DegenerateDirection { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("internal inconsistency: {0}")]
    Internal(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("sweep does not bracket the transition: {0}")]
    NoBracket(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
