//! Domain types and the pure mathematical evaluations of the mixture model:
//! covariate-shifted centroids, covariate-scaled covariances in Cholesky form,
//! the Gaussian log-density, and the mixture log-likelihood.

mod density;

pub use density::{centroid, covariance, displacement, log_density, log_likelihood};
pub(crate) use density::{clamp_scale, factor_spd, log_components, loglik_and_resp, scales_clamped, scales_matrix};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splines::SplineSpec;

/// Magnitude floor for the diagonal entries of the covariance scale matrix L.
/// Entries below it are clamped (sign-preserving, zero maps to +floor) so the
/// assembled covariance stays invertible during fitting.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Ridge added to a cluster core matrix E when its Cholesky factorization
/// fails, keeping iterations alive on near-degenerate clusters.
pub const E_RIDGE: f64 = 1e-8;

/// Full parameter vector of the K-cluster model.
///
/// Shapes: `alpha` has K weights, `mu_star` is K×M, `beta[j]` is Q×M where Q
/// is the centroid design width (number of centroid covariates, or spline
/// basis columns in the nonlinear case), `sigma` is K×M, `gamma[j]` is
/// P_cov×M for the covariates with a covariance effect, and `e[j]` is an M×M
/// symmetric positive-definite core.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub alpha: Vec<f64>,
    pub mu_star: DMatrix<f64>,
    pub beta: Vec<DMatrix<f64>>,
    pub sigma: DMatrix<f64>,
    pub gamma: Vec<DMatrix<f64>>,
    pub e: Vec<DMatrix<f64>>,
}

impl ClusterParams {
    /// A zero-effect parameter set: uniform weights, zero centroids and
    /// covariate effects, unit sigma, identity cores.
    pub fn zeroed(k: usize, m: usize, q: usize, p_cov: usize) -> Self {
        Self {
            alpha: vec![1.0 / k as f64; k],
            mu_star: DMatrix::zeros(k, m),
            beta: (0..k).map(|_| DMatrix::zeros(q, m)).collect(),
            sigma: DMatrix::from_element(k, m, 1.0),
            gamma: (0..k).map(|_| DMatrix::zeros(p_cov, m)).collect(),
            e: (0..k).map(|_| DMatrix::identity(m, m)).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn m(&self) -> usize {
        self.mu_star.ncols()
    }

    /// Centroid design width Q (covariate count, or spline columns).
    pub fn q(&self) -> usize {
        self.beta.first().map_or(0, |b| b.nrows())
    }

    /// Number of covariates with a covariance effect.
    pub fn p_cov(&self) -> usize {
        self.gamma.first().map_or(0, |g| g.nrows())
    }

    /// Checks the structural invariants: weights in [0,1] summing to one,
    /// symmetric positive-definite cores, and finite entries everywhere.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let m = self.m();
        if self.mu_star.nrows() != k
            || self.sigma.nrows() != k
            || self.sigma.ncols() != m
            || self.beta.len() != k
            || self.gamma.len() != k
            || self.e.len() != k
        {
            return Err(Error::DimensionMismatch("parameter block shapes disagree on K or M".into()));
        }
        let alpha_sum: f64 = self.alpha.iter().sum();
        if (alpha_sum - 1.0).abs() > 1e-10 || self.alpha.iter().any(|&a| !(0.0..=1.0 + 1e-12).contains(&a)) {
            return Err(Error::InvalidInput(format!(
                "cluster weights must lie in [0,1] and sum to 1 (sum = {alpha_sum})"
            )));
        }
        for (j, e) in self.e.iter().enumerate() {
            if e.nrows() != m || e.ncols() != m {
                return Err(Error::DimensionMismatch(format!("E_{j} is not M×M")));
            }
            for r in 0..m {
                for c in 0..r {
                    if (e[(r, c)] - e[(c, r)]).abs() > 1e-10 {
                        return Err(Error::InvalidInput(format!("E_{j} is not symmetric within 1e-10")));
                    }
                }
            }
            if nalgebra::Cholesky::new(e.clone()).is_none() {
                return Err(Error::NotPositiveDefinite);
            }
        }
        let finite = self.mu_star.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|v| v.is_finite())
            && self.beta.iter().all(|b| b.iter().all(|v| v.is_finite()))
            && self.gamma.iter().all(|g| g.iter().all(|v| v.is_finite()))
            && self.e.iter().all(|e| e.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidInput("parameters contain non-finite entries".into()));
        }
        Ok(())
    }

    /// Relabels the clusters by `perm` (new index i takes old cluster
    /// `perm[i]`), moving all parameter blocks jointly.
    pub fn permute_clusters(&self, perm: &[usize]) -> Self {
        let m = self.m();
        let mut out = self.clone();
        for (new_j, &old_j) in perm.iter().enumerate() {
            out.alpha[new_j] = self.alpha[old_j];
            for c in 0..m {
                out.mu_star[(new_j, c)] = self.mu_star[(old_j, c)];
                out.sigma[(new_j, c)] = self.sigma[(old_j, c)];
            }
            out.beta[new_j] = self.beta[old_j].clone();
            out.gamma[new_j] = self.gamma[old_j].clone();
            out.e[new_j] = self.e[old_j].clone();
        }
        out
    }
}

/// Model structure and fitting controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Cluster count K ≥ 1.
    pub k: usize,
    /// Covariate indices with a centroid effect (β).
    pub centroid_covariates: Vec<usize>,
    /// Covariate indices with a covariance effect (γ). Must be empty when a
    /// spline is configured: the nonlinear extension applies to centroids only.
    pub covariance_covariates: Vec<usize>,
    /// When set, each centroid covariate enters through a B-spline basis.
    pub spline: Option<SplineSpec>,
    /// Number of independent initializations; the best final likelihood wins.
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative log-likelihood change declaring convergence.
    pub loglik_rel_tol: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// A configuration with no covariate effects and the default controls
    /// (20 restarts, 500 iterations, relative tolerance 1e-8).
    pub fn new(k: usize) -> Self {
        Self {
            k,
            centroid_covariates: Vec::new(),
            covariance_covariates: Vec::new(),
            spline: None,
            restarts: 20,
            max_iter: 500,
            loglik_rel_tol: 1e-8,
            seed: 0,
        }
    }

    pub fn with_centroid_covariates(mut self, idx: Vec<usize>) -> Self {
        self.centroid_covariates = idx;
        self
    }

    pub fn with_covariance_covariates(mut self, idx: Vec<usize>) -> Self {
        self.covariance_covariates = idx;
        self
    }

    pub fn with_spline(mut self, spec: SplineSpec) -> Self {
        self.spline = Some(spec);
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.loglik_rel_tol = tol;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Validates the configuration on its own and against a data set.
    pub fn validate(&self, n_covariates: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("K must be at least 1".into()));
        }
        if self.restarts == 0 || self.max_iter == 0 {
            return Err(Error::InvalidInput("restarts and max_iter must be positive".into()));
        }
        if !(self.loglik_rel_tol > 0.0) {
            return Err(Error::InvalidInput("loglik_rel_tol must be positive".into()));
        }
        if self.spline.is_some() && !self.covariance_covariates.is_empty() {
            return Err(Error::InvalidInput(
                "spline models support centroid effects only; covariance_covariates must be empty".into(),
            ));
        }
        for &l in self.centroid_covariates.iter().chain(&self.covariance_covariates) {
            if l >= n_covariates {
                return Err(Error::InvalidInput(format!(
                    "covariate index {l} out of range for P = {n_covariates}"
                )));
            }
        }
        Ok(())
    }
}

/// Posterior membership probabilities: an N×K row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    matrix: DMatrix<f64>,
}

impl Responsibilities {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        for i in 0..matrix.nrows() {
            let row_sum: f64 = matrix.row(i).iter().sum();
            if (row_sum - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidInput(format!(
                    "responsibility row {i} sums to {row_sum}, expected 1"
                )));
            }
            if matrix.row(i).iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::InvalidInput(format!("responsibility row {i} leaves [0,1]")));
            }
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_items(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn k(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Hard cluster assignment: one label in [0, K) per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    labels: Vec<usize>,
}

impl Assignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for K = {k}")));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Outcome of a full multi-restart fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ClusterParams,
    pub responsibilities: Responsibilities,
    pub assignment: Assignment,
    /// Mixture log-likelihood after each EM iteration (first entry is the
    /// initial parameters' likelihood).
    pub loglik_trace: Vec<f64>,
    pub final_loglik: f64,
    pub bic: f64,
    pub converged: bool,
    pub n_iter: usize,
    /// Which restart produced this result.
    pub restart_index: usize,
}
