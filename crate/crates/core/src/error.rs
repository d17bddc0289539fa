//! Crate error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmrError {
    /// A masked covariance submatrix has no Cholesky factorization.
    #[error("covariance not invertible")]
    CovarianceNotInvertible,

    /// Every aspect of a pair is unobserved on at least one side.
    #[error("empty comparison: no aspect observed for both items")]
    EmptyComparison,

    /// The observed difference vector is zero on the shared aspects, so it
    /// spans no direction.
    #[error("zero difference vector: items tie on every shared aspect")]
    ZeroDifference,

    /// Dimensions of two quantities that must agree do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Adaptive quadrature hit its subdivision limit before reaching the
    /// requested tolerance.
    #[error("quadrature did not converge: achieved tolerance {achieved:e} > requested {requested:e}")]
    QuadratureNonConvergence { achieved: f64, requested: f64 },

    /// An index referred to a user, item, or aspect outside the model.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A pairwise operation was asked to compare an item with itself.
    #[error("cannot compare an item with itself (item {0})")]
    SameItem(usize),

    /// The training objective became non-finite.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    /// No user in the training partition rated two comparable items.
    #[error("no comparable pairs in the training partition")]
    NoComparablePairs,

    /// A rating file could not be parsed.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// A checkpoint file is malformed or from an unsupported version.
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    /// A configuration value is outside its legal range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A numerical self-check failed.
    #[error("verification failed: {0}")]
    VerificationFailed(String),

    /// Every candidate aspect was excluded from an explanation.
    #[error("no explainable aspect: {0}")]
    NoExplainableAspect(String),

    /// Dataset contents violate an operation's requirements.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
