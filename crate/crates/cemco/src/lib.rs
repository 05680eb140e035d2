//! CEM-Co: model-based clustering of multivariate data in which external
//! covariates shift cluster centroids (linearly, or nonlinearly through
//! B-splines) and scale cluster covariance matrices.
//!
//! The crate provides:
//! - the mixture model itself and a classification-EM fitter with
//!   Newton-Raphson covariance-scale updates and multi-restart selection
//!   ([`engine::fit`]),
//! - likelihood-ratio and parametric-bootstrap tests for covariate effects,
//!   BIC-based cluster-count selection ([`inference`]),
//! - the standard CEM baselines that ignore, append, or regress out the
//!   covariates ([`baselines`]),
//! - scenario generators, the adjusted Rand index, and a benchmark runner
//!   ([`simulation`]).

pub mod baselines;
pub mod data;
mod design;
pub mod engine;
pub mod error;
pub mod inference;
pub mod model;
pub mod simulation;
pub mod splines;
mod util;

pub use data::DataSet;
pub use error::{Error, Result};
pub use model::{Assignment, ClusterParams, FitResult, ModelConfig, Responsibilities};
pub use splines::{SplineBasis, SplineSpec};
