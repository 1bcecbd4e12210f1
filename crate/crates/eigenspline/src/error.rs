use thiserror::Error;

/// Errors produced by the fitting, eigensystem, and bound computations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The null-space design matrix is rank deficient (e.g. all design
    /// points equal); the solvers require full column rank.
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An eigenfunction was requested for a zero (clamped) eigenvalue.
    #[error("eigenvalue {index} is zero; approximate eigenfunction undefined")]
    ZeroEigenvalue { index: usize },

    #[error("requested rank {requested} exceeds the {available} available modes")]
    RankExceeded { requested: usize, available: usize },

    #[error("operation requires the {required} kernel, got {got}")]
    UnsupportedKernel { required: &'static str, got: String },

    /// Malformed serialized payload (bad magic bytes, version, or layout).
    #[error("format error: {0}")]
    Format(String),

    /// Payload parsed but failed its integrity check.
    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("invalid fit: {0}")]
    InvalidFit(String),

    #[error("smoothing parameter selection failed: {0}")]
    SelectionFailure(String),
}

pub type Result<T> = std::result::Result<T, Error>;
