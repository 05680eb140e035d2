//! The three standard comparison methods: plain CEM on the items, CEM with
//! the covariates appended as extra dimensions, and CEM on the residuals of
//! a per-dimension linear regression on the covariates.

use nalgebra::DMatrix;

use crate::data::DataSet;
use crate::engine::fit;
use crate::error::{Error, Result};
use crate::model::{FitResult, ModelConfig};

fn plain_config(k: usize, restarts: usize, seed: u64) -> ModelConfig {
    ModelConfig::new(k).with_restarts(restarts).with_seed(seed)
}

/// Standard CEM: clusters the items with every covariate effect disabled.
pub fn cem_fit(data: &DataSet, k: usize, restarts: usize, seed: u64) -> Result<FitResult> {
    fit(data, &plain_config(k, restarts, seed))
}

/// CEM on the N×(M+P) concatenation of items and standardized covariate
/// columns. The assignment is still over the N items; a constant covariate
/// column standardizes to zeros and carries no information.
pub fn cem_dimension_fit(data: &DataSet, k: usize, restarts: usize, seed: u64) -> Result<FitResult> {
    let p = data.n_covariates();
    if p == 0 {
        return cem_fit(data, k, restarts, seed);
    }
    let n = data.n_items();
    let m = data.n_dims();
    let mut wide = DMatrix::zeros(n, m + p);
    wide.view_mut((0, 0), (n, m)).copy_from(data.items());
    for c in 0..p {
        let col = data.covariates().column(c);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        let sd = var.sqrt();
        for i in 0..n {
            wide[(i, m + c)] = if sd > 0.0 { (col[i] - mean) / sd } else { 0.0 };
        }
    }
    let widened = DataSet::new(wide, DMatrix::zeros(n, 0))?;
    cem_fit(&widened, k, restarts, seed)
}

/// CEM on the residuals of ordinary least squares x_r ~ (1, z) per item
/// dimension, assuming a covariate effect common to all clusters. Collinear
/// covariate columns are dropped with a warning.
pub fn cem_partial_fit(data: &DataSet, k: usize, restarts: usize, seed: u64) -> Result<FitResult> {
    let p = data.n_covariates();
    if p == 0 {
        return cem_fit(data, k, restarts, seed);
    }
    let n = data.n_items();

    let mut kept: Vec<usize> = (0..p).collect();
    let residuals = loop {
        let cols = kept.len();
        let mut design = DMatrix::zeros(n, cols + 1);
        design.column_mut(0).fill(1.0);
        for (c, &l) in kept.iter().enumerate() {
            design.column_mut(c + 1).copy_from(&data.covariates().column(l));
        }
        let svd = design.clone().svd(true, true);
        let eps = 1e-10 * n as f64;
        if svd.rank(eps) < cols + 1 {
            let dropped = kept.pop().ok_or_else(|| {
                Error::InvalidInput("covariate matrix is rank-deficient even when empty".into())
            })?;
            log::warn!("dropping collinear covariate column {dropped} before residual clustering");
            continue;
        }
        let coeffs = svd
            .solve(data.items(), eps)
            .map_err(|e| Error::InvalidInput(format!("least squares failed: {e}")))?;
        break data.items() - design * coeffs;
    };

    let residual_data = DataSet::new(residuals, DMatrix::zeros(n, 0))?;
    cem_fit(&residual_data, k, restarts, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use crate::simulation::adjusted_rand_index;

    fn separated_blobs(n_half: usize, seed: u64) -> (DataSet, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let n = 2 * n_half;
        let mut items = DMatrix::zeros(n, 2);
        let mut truth = Vec::with_capacity(n);
        for i in 0..n {
            let (cx, label) = if i < n_half { (0.0, 0) } else { (10.0, 1) };
            items[(i, 0)] = cx + noise.sample(&mut rng);
            items[(i, 1)] = noise.sample(&mut rng);
            truth.push(label);
        }
        (DataSet::new(items, DMatrix::zeros(n, 0)).unwrap(), truth)
    }

    #[test]
    fn cem_separates_well_separated_gaussians() {
        let (data, truth) = separated_blobs(100, 3);
        let result = cem_fit(&data, 2, 5, 0).unwrap();
        let truth = crate::model::Assignment::new(truth, 2).unwrap();
        assert_eq!(adjusted_rand_index(&result.assignment, &truth).unwrap(), 1.0);
    }

    #[test]
    fn with_no_covariates_all_three_baselines_agree_exactly() {
        let (data, _) = separated_blobs(40, 9);
        let a = cem_fit(&data, 2, 4, 7).unwrap();
        let b = cem_dimension_fit(&data, 2, 4, 7).unwrap();
        let c = cem_partial_fit(&data, 2, 4, 7).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.assignment, c.assignment);
        assert_eq!(a.final_loglik, b.final_loglik);
        assert_eq!(a.final_loglik, c.final_loglik);
    }

    #[test]
    fn constant_covariate_leaves_dimension_assignment_unchanged() {
        let (data, _) = separated_blobs(40, 17);
        let constant = DMatrix::from_element(80, 1, 3.5);
        let with_cov =
            DataSet::new(data.items().clone(), constant).unwrap();
        let plain = cem_fit(&data, 2, 4, 5).unwrap();
        let widened = cem_dimension_fit(&with_cov, 2, 4, 5).unwrap();
        assert_eq!(plain.assignment, widened.assignment);
    }

    #[test]
    fn partial_recovers_truth_under_a_common_effect() {
        // Identical covariate effect in every cluster is exactly the
        // assumption residual clustering needs.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let zdist = Normal::new(0.0, 1.0).unwrap();
        let n = 800;
        let mut items = DMatrix::zeros(n, 2);
        let mut cov = DMatrix::zeros(n, 1);
        let mut truth = Vec::with_capacity(n);
        for i in 0..n {
            let (c0, label) = if i < n / 2 { (0.0, 0) } else { (3.0, 1) };
            let z = zdist.sample(&mut rng);
            cov[(i, 0)] = z;
            items[(i, 0)] = c0 + 2.0 * z + noise.sample(&mut rng);
            items[(i, 1)] = -1.5 * z + noise.sample(&mut rng);
            truth.push(label);
        }
        let data = DataSet::new(items, cov).unwrap();
        let result = cem_partial_fit(&data, 2, 5, 1).unwrap();
        let truth = crate::model::Assignment::new(truth, 2).unwrap();
        let ari = adjusted_rand_index(&result.assignment, &truth).unwrap();
        assert!(ari > 0.98, "ari = {ari}");
    }

    #[test]
    fn uninformative_covariate_barely_changes_partial_assignment() {
        let (data, _) = separated_blobs(150, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let zdist = Normal::new(0.0, 1.0).unwrap();
        let z = DMatrix::from_fn(300, 1, |_, _| zdist.sample(&mut rng));
        let with_cov = DataSet::new(data.items().clone(), z).unwrap();
        let plain = cem_fit(&data, 2, 4, 2).unwrap();
        let partial = cem_partial_fit(&with_cov, 2, 4, 2).unwrap();
        let ari = adjusted_rand_index(&plain.assignment, &partial.assignment).unwrap();
        assert!(ari >= 0.9, "ari = {ari}");
    }

    #[test]
    fn collinear_covariates_are_dropped_not_fatal() {
        let (data, _) = separated_blobs(30, 41);
        let z = DMatrix::from_fn(60, 2, |i, _| i as f64); // two identical columns
        let with_cov = DataSet::new(data.items().clone(), z).unwrap();
        assert!(cem_partial_fit(&with_cov, 2, 3, 0).is_ok());
    }
}
