//! Error types shared across the estimation stack.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("matrix is not positive definite (pivot {pivot:.3e} below tolerance {tol:.3e} at index {index})")]
    NotPositiveDefinite { pivot: f64, tol: f64, index: usize },
    #[error("rank-deficient factor (|diag| {value:.3e} below tolerance {tol:.3e} at index {index})")]
    RankDeficient { value: f64, tol: f64, index: usize },
    #[error("singular triangular factor at diagonal index {index}")]
    SingularFactor { index: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SrfError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("unknown state block: {0}")]
    UnknownBlock(String),
    #[error("factor has deferred rows; triangularize before the update")]
    DeferredFactor,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("sample buffer empty or too short")]
    EmptyBuffer,
    #[error("non-monotonic timestamps at sample {0}")]
    NonMonotonicTimestamps(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisionError {
    #[error("point behind camera (depth {0:.3e})")]
    BehindCamera(f64),
    #[error("insufficient parallax (metric {0:.3e})")]
    LowParallax(f64),
    #[error("triangulated depth is negative")]
    NegativeDepth,
    #[error("unknown clone timestamp {0}")]
    UnknownClone(i64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Srf(#[from] SrfError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate geometry (eigenvalue ratio {0:.3e})")]
    DegenerateGeometry(f64),
    #[error("ill-conditioned linear system (cond {0:.3e})")]
    IllConditioned(f64),
    #[error("refinement diverged after {0} iterations")]
    Diverged(usize),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Srf(#[from] SrfError),
    #[error(transparent)]
    Vision(#[from] VisionError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("{file}:{line}: malformed row: {msg}")]
    MalformedRow { file: String, line: usize, msg: String },
    #[error("{file}: ambiguous or missing units for key '{key}'")]
    UnitsAmbiguous { file: String, key: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
