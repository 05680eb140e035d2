//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by the clustering, inference, and simulation modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("model-core: dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("model-core: invalid input: {0}")]
    InvalidInput(String),

    #[error("model-core: covariance factorization failed: matrix is not positive-definite")]
    NotPositiveDefinite,

    #[error(
        "model-core: degenerate covariance scale: |L diagonal| = {value:.3e} below floor {floor:.1e} \
         (dimension {dim})"
    )]
    DegenerateScale { value: f64, floor: f64, dim: usize },

    #[error("cemco-engine: cluster count K={k} exceeds item count N={n}")]
    TooManyClusters { k: usize, n: usize },

    #[error("cemco-engine: all {0} restarts failed; data may be degenerate")]
    AllRestartsFailed(usize),

    #[error("splines: {0}")]
    Spline(String),

    #[error("inference: {0}")]
    Inference(String),

    #[error("simulation: {0}")]
    Simulation(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
