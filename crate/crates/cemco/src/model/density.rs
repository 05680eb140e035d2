//! Centroid and covariance assembly, the multivariate normal log-density,
//! and the mixture log-likelihood. Everything is evaluated in log space.

use nalgebra::{Cholesky, DMatrix, DVector, DVectorView};

use crate::data::DataSet;
use crate::design::{build_centroid_design, build_covariance_design, CentroidDesign};
use crate::error::{Error, Result};

use super::{ClusterParams, ModelConfig, E_RIDGE, SCALE_FLOOR};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Covariate-shifted centroid of cluster `j`: μ* plus the covariate
/// displacement. `design_row` is the item's covariate row (or its spline
/// basis row when the nonlinear model is active) and must have Q entries.
pub fn centroid(params: &ClusterParams, j: usize, design_row: &[f64]) -> Result<DVector<f64>> {
    let d = displacement(params, j, design_row)?;
    Ok(params.mu_star.row(j).transpose() + d)
}

/// The covariate-induced centroid shift of cluster `j` for one item.
pub fn displacement(params: &ClusterParams, j: usize, design_row: &[f64]) -> Result<DVector<f64>> {
    if j >= params.k() {
        return Err(Error::InvalidInput(format!("cluster index {j} out of range")));
    }
    if design_row.len() != params.q() {
        return Err(Error::DimensionMismatch(format!(
            "design row has {} entries, expected Q = {}",
            design_row.len(),
            params.q()
        )));
    }
    let w = DVectorView::from_slice(design_row, design_row.len());
    Ok(params.beta[j].transpose() * w)
}

/// Item-specific covariance of cluster `j`: Σ = L E L with L diagonal in the
/// covariance covariates. Fails when a diagonal entry of L falls below the
/// magnitude floor; the fitter clamps instead (see [`scales_clamped`]).
pub fn covariance(params: &ClusterParams, j: usize, z_cov_row: &[f64]) -> Result<DMatrix<f64>> {
    if j >= params.k() {
        return Err(Error::InvalidInput(format!("cluster index {j} out of range")));
    }
    if z_cov_row.len() != params.p_cov() {
        return Err(Error::DimensionMismatch(format!(
            "covariance covariate row has {} entries, expected {}",
            z_cov_row.len(),
            params.p_cov()
        )));
    }
    let m = params.m();
    let mut scale = DVector::zeros(m);
    for r in 0..m {
        let mut a = params.sigma[(j, r)];
        for (l, &z) in z_cov_row.iter().enumerate() {
            a += params.gamma[j][(l, r)] * z;
        }
        if a.abs() < SCALE_FLOOR {
            return Err(Error::DegenerateScale { value: a, floor: SCALE_FLOOR, dim: r });
        }
        scale[r] = a;
    }
    let mut cov = params.e[j].clone();
    for r in 0..m {
        for c in 0..m {
            cov[(r, c)] *= scale[r] * scale[c];
        }
    }
    Ok(cov)
}

/// Diagonal of L for one item with magnitudes clamped to the floor
/// (sign-preserving; an exact zero maps to +floor).
pub(crate) fn scales_clamped(params: &ClusterParams, j: usize, z_cov_row: &[f64]) -> DVector<f64> {
    let m = params.m();
    let mut scale = DVector::zeros(m);
    for r in 0..m {
        let mut a = params.sigma[(j, r)];
        for (l, &z) in z_cov_row.iter().enumerate() {
            a += params.gamma[j][(l, r)] * z;
        }
        scale[r] = clamp_scale(a);
    }
    scale
}

pub(crate) fn clamp_scale(a: f64) -> f64 {
    if a.abs() >= SCALE_FLOOR {
        a
    } else if a < 0.0 {
        -SCALE_FLOOR
    } else {
        SCALE_FLOOR
    }
}

/// Clamped L diagonals of cluster `j` for every item at once (N×M).
pub(crate) fn scales_matrix(
    params: &ClusterParams,
    j: usize,
    cov_design: &DMatrix<f64>,
) -> DMatrix<f64> {
    let m = params.m();
    let mut scales = cov_design * &params.gamma[j];
    for c in 0..m {
        scales.column_mut(c).add_scalar_mut(params.sigma[(j, c)]);
    }
    for v in scales.iter_mut() {
        *v = clamp_scale(*v);
    }
    scales
}

/// Cached Cholesky factor of a cluster core E.
#[derive(Debug, Clone)]
pub(crate) struct ClusterFactor {
    /// Lower-triangular factor, E (+ ridge if needed) = L Lᵀ.
    pub lower: DMatrix<f64>,
    pub logdet: f64,
}

/// Factors a symmetric positive-definite core, retrying once with a small
/// ridge when the factorization fails near degeneracy.
pub(crate) fn factor_spd(e: &DMatrix<f64>) -> Result<ClusterFactor> {
    let chol = match Cholesky::new(e.clone()) {
        Some(c) => c,
        None => {
            let mut ridged = e.clone();
            for r in 0..e.nrows() {
                ridged[(r, r)] += E_RIDGE;
            }
            Cholesky::new(ridged).ok_or(Error::NotPositiveDefinite)?
        }
    };
    let lower = chol.unpack();
    let logdet = 2.0 * (0..lower.nrows()).map(|r| lower[(r, r)].ln()).sum::<f64>();
    Ok(ClusterFactor { lower, logdet })
}

/// Log-density of the multivariate normal, computed through a Cholesky
/// factorization of the covariance (never via an explicit determinant).
pub fn log_density(x: &DVector<f64>, mu: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let m = x.len();
    if mu.len() != m || cov.nrows() != m || cov.ncols() != m {
        return Err(Error::DimensionMismatch("x, mu, and cov disagree on M".into()));
    }
    let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite)?;
    let lower = chol.unpack();
    let logdet = 2.0 * (0..m).map(|r| lower[(r, r)].ln()).sum::<f64>();
    let y = lower
        .solve_lower_triangular(&(x - mu))
        .ok_or(Error::NotPositiveDefinite)?;
    Ok(-0.5 * (m as f64 * LN_2PI + logdet + y.norm_squared()))
}

/// N×K matrix of ln α_j + ln φ(x_i, μ_ij, Σ_ij), using per-cluster cached
/// factors of E and item-specific diagonal scales.
pub(crate) fn log_components(
    data: &DataSet,
    design: &CentroidDesign,
    cov_design: &DMatrix<f64>,
    params: &ClusterParams,
) -> Result<DMatrix<f64>> {
    let n = data.n_items();
    let m = data.n_dims();
    let k = params.k();
    let p_cov = params.p_cov();
    if params.m() != m {
        return Err(Error::DimensionMismatch("parameters and items disagree on M".into()));
    }
    if params.q() != design.q() {
        return Err(Error::DimensionMismatch(format!(
            "parameters expect Q = {}, design has {}",
            params.q(),
            design.q()
        )));
    }
    if cov_design.ncols() != p_cov {
        return Err(Error::DimensionMismatch("covariance design width != P_cov".into()));
    }

    let mut lc = DMatrix::zeros(n, k);
    let base = -0.5 * m as f64 * LN_2PI;
    for j in 0..k {
        let factor = factor_spd(&params.e[j])?;
        let ln_alpha = params.alpha[j].ln();

        // Residuals x_i − μ*_j − d_ij for every item at once.
        let mut resid = data.items().clone();
        if design.q() > 0 {
            resid -= &design.matrix * &params.beta[j];
        }
        for c in 0..m {
            resid.column_mut(c).add_scalar_mut(-params.mu_star[(j, c)]);
        }

        let mut logdet_row = DVector::from_element(n, factor.logdet);
        if p_cov > 0 {
            let mut scales = cov_design * &params.gamma[j];
            for c in 0..m {
                scales.column_mut(c).add_scalar_mut(params.sigma[(j, c)]);
            }
            for i in 0..n {
                for c in 0..m {
                    let a = clamp_scale(scales[(i, c)]);
                    logdet_row[i] += 2.0 * a.abs().ln();
                    resid[(i, c)] /= a;
                }
            }
        }

        // Solve L y = uᵀ for all items in one triangular solve; the squared
        // column norms are the Mahalanobis terms.
        let y = factor
            .lower
            .solve_lower_triangular(&resid.transpose())
            .ok_or(Error::NotPositiveDefinite)?;
        for i in 0..n {
            let q = y.column(i).norm_squared();
            lc[(i, j)] = ln_alpha + base - 0.5 * (logdet_row[i] + q);
        }
    }
    Ok(lc)
}

/// Row-wise log-sum-exp: total mixture log-likelihood, the responsibility
/// matrix, and the count of items whose every component underflowed (those
/// rows fall back to uniform membership).
pub(crate) fn loglik_and_resp(lc: &DMatrix<f64>) -> (f64, DMatrix<f64>, usize) {
    let (n, k) = lc.shape();
    let mut resp = DMatrix::zeros(n, k);
    let mut total = 0.0;
    let mut underflows = 0;
    for i in 0..n {
        let row_max = lc.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !row_max.is_finite() {
            for j in 0..k {
                resp[(i, j)] = 1.0 / k as f64;
            }
            underflows += 1;
            total += row_max;
            continue;
        }
        let mut sum = 0.0;
        for j in 0..k {
            let v = (lc[(i, j)] - row_max).exp();
            resp[(i, j)] = v;
            sum += v;
        }
        total += row_max + sum.ln();
        for j in 0..k {
            resp[(i, j)] /= sum;
        }
    }
    (total, resp, underflows)
}

/// Mixture log-likelihood of the data under `params` (Σ_i ln Σ_j α_j φ_ij),
/// with item-specific centroids and covariances from the covariate model.
pub fn log_likelihood(data: &DataSet, params: &ClusterParams, config: &ModelConfig) -> Result<f64> {
    config.validate(data.n_covariates())?;
    let design = build_centroid_design(data, config)?;
    let cov_design = build_covariance_design(data, config);
    let lc = log_components(data, &design, &cov_design, params)?;
    let (ll, _, underflows) = loglik_and_resp(&lc);
    if underflows > 0 {
        log::warn!("{underflows} items underflowed every mixture component");
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn two_cluster_params() -> ClusterParams {
        // Scenario-2-like geometry: K=2, M=2, one centroid covariate.
        let mut p = ClusterParams::zeroed(2, 2, 1, 0);
        p.mu_star = dmatrix![0.0, 0.0; 0.0, 1.0];
        p.beta[0] = dmatrix![0.3, 0.3];
        p.beta[1] = dmatrix![-0.3, -0.3];
        p
    }

    #[test]
    fn centroid_zero_effect_returns_mu_star() {
        let mut p = two_cluster_params();
        p.beta[0].fill(0.0);
        let mu = centroid(&p, 0, &[1.7]).unwrap();
        assert_eq!(mu, dvector![0.0, 0.0]);
    }

    #[test]
    fn centroid_hand_values() {
        let p = two_cluster_params();
        let mu1 = centroid(&p, 0, &[1.0]).unwrap();
        assert_abs_diff_eq!(mu1[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(mu1[1], 0.3, epsilon = 1e-15);
        let mu2 = centroid(&p, 1, &[2.0]).unwrap();
        assert_abs_diff_eq!(mu2[0], -0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(mu2[1], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn centroid_dimension_mismatch() {
        let p = two_cluster_params();
        assert!(centroid(&p, 0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn covariance_identity_scales_return_e() {
        let mut p = ClusterParams::zeroed(1, 2, 0, 1);
        p.e[0] = dmatrix![2.0, 0.5; 0.5, 1.0];
        p.gamma[0] = dmatrix![0.0, 0.0];
        let cov = covariance(&p, 0, &[3.0]).unwrap();
        assert_eq!(cov, p.e[0]);
    }

    #[test]
    fn covariance_scalar_case() {
        // M=1: sigma=1, gamma=2, z=0.5, E=[0.25] -> L=2, Sigma=[1.0].
        let mut p = ClusterParams::zeroed(1, 1, 0, 1);
        p.gamma[0] = dmatrix![2.0];
        p.e[0] = dmatrix![0.25];
        let cov = covariance(&p, 0, &[0.5]).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance_two_dims() {
        // sigma=(1,1), gamma row=(1,1), z=1, E=0.1 I -> Sigma = 0.4 I.
        let mut p = ClusterParams::zeroed(1, 2, 0, 1);
        p.gamma[0] = dmatrix![1.0, 1.0];
        p.e[0] = dmatrix![0.1, 0.0; 0.0, 0.1];
        let cov = covariance(&p, 0, &[1.0]).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(cov[(1, 1)], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(cov[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn covariance_degenerate_scale_errors() {
        let mut p = ClusterParams::zeroed(1, 1, 0, 1);
        p.gamma[0] = dmatrix![1.0];
        assert!(matches!(
            covariance(&p, 0, &[-1.0]),
            Err(Error::DegenerateScale { .. })
        ));
    }

    #[test]
    fn log_density_at_mean_identity_cov() {
        for m in 1..=4 {
            let x = DVector::zeros(m);
            let cov = DMatrix::identity(m, m);
            let ld = log_density(&x, &x, &cov).unwrap();
            assert_abs_diff_eq!(ld, -0.5 * m as f64 * LN_2PI, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_density_scalar_value() {
        let ld = log_density(&dvector![1.0], &dvector![0.0], &dmatrix![1.0]).unwrap();
        assert_abs_diff_eq!(ld, -0.5 - 0.5 * LN_2PI, epsilon = 1e-12);
        assert_abs_diff_eq!(ld, -1.418_938_533_204_672_7, epsilon = 1e-6);
    }

    #[test]
    fn log_density_diagonal_value() {
        let ld = log_density(
            &dvector![0.0, 0.0],
            &dvector![0.0, 0.0],
            &dmatrix![4.0, 0.0; 0.0, 4.0],
        )
        .unwrap();
        assert_abs_diff_eq!(ld, -LN_2PI - 4.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ld, -3.224_171, epsilon = 1e-6);
    }

    #[test]
    fn log_density_rejects_non_pd() {
        let cov = dmatrix![1.0, 2.0; 2.0, 1.0];
        assert!(matches!(
            log_density(&dvector![0.0, 0.0], &dvector![0.0, 0.0], &cov),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn log_density_integrates_to_one_on_a_grid() {
        // Trapezoid rule over ±10σ for a few scalar normals.
        for (mu, var) in [(0.0f64, 1.0f64), (2.0, 0.25), (-1.0, 4.0)] {
            let sd = var.sqrt();
            let n = 20_001;
            let lo = mu - 10.0 * sd;
            let hi = mu + 10.0 * sd;
            let h = (hi - lo) / (n - 1) as f64;
            let muv = dvector![mu];
            let cov = dmatrix![var];
            let mut total = 0.0;
            for i in 0..n {
                let x = lo + h * i as f64;
                let f = log_density(&dvector![x], &muv, &cov).unwrap().exp();
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                total += w * f;
            }
            total *= h;
            assert!((total - 1.0).abs() < 1e-6, "integral {total} for mu={mu} var={var}");
        }
    }

    #[test]
    fn log_likelihood_single_component_drops_weights() {
        let items = dmatrix![0.0; 1.0];
        let data = DataSet::new(items, DMatrix::zeros(2, 0)).unwrap();
        let params = ClusterParams::zeroed(1, 1, 0, 0);
        let config = ModelConfig::new(1);
        let ll = log_likelihood(&data, &params, &config).unwrap();
        // Two scalar standard normal log-densities at 0 and 1.
        assert_abs_diff_eq!(ll, -LN_2PI - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ll, -2.337_877, epsilon = 1e-6);
    }

    #[test]
    fn log_likelihood_identical_components_match_single() {
        let items = dmatrix![0.2, -0.3; 1.0, 0.4; -0.7, 0.9];
        let data = DataSet::new(items, DMatrix::zeros(3, 0)).unwrap();
        let one = ClusterParams::zeroed(1, 2, 0, 0);
        let two = ClusterParams::zeroed(2, 2, 0, 0);
        let ll1 = log_likelihood(&data, &one, &ModelConfig::new(1)).unwrap();
        let ll2 = log_likelihood(&data, &two, &ModelConfig::new(2)).unwrap();
        assert_abs_diff_eq!(ll1, ll2, epsilon = 1e-12);
    }

    #[test]
    fn log_likelihood_invariant_under_cluster_relabeling() {
        let items = dmatrix![0.2, -0.3; 1.0, 0.4; -0.7, 0.9; 0.1, 0.1];
        let cov = dmatrix![1.0; -1.0; 0.5; 0.0];
        let data = DataSet::new(items, cov).unwrap();
        let config = ModelConfig::new(3)
            .with_centroid_covariates(vec![0])
            .with_covariance_covariates(vec![0]);
        let mut p = ClusterParams::zeroed(3, 2, 1, 1);
        p.alpha = vec![0.5, 0.3, 0.2];
        p.mu_star = dmatrix![0.0, 0.0; 1.0, -1.0; 0.3, 0.3];
        p.beta[0] = dmatrix![0.2, -0.1];
        p.beta[1] = dmatrix![0.0, 0.4];
        p.beta[2] = dmatrix![-0.3, 0.05];
        p.gamma[0] = dmatrix![0.1, 0.0];
        p.gamma[1] = dmatrix![0.0, 0.2];
        p.gamma[2] = dmatrix![0.05, 0.05];
        p.e[1] = dmatrix![2.0, 0.3; 0.3, 1.0];
        let ll = log_likelihood(&data, &p, &config).unwrap();
        let permuted = p.permute_clusters(&[2, 0, 1]);
        let ll_perm = log_likelihood(&data, &permuted, &config).unwrap();
        assert_abs_diff_eq!(ll, ll_perm, epsilon = 1e-12);
    }

    /// Independent straightforward mixture log-likelihood via explicit
    /// determinant and inverse.
    fn naive_gmm_loglik(items: &DMatrix<f64>, params: &ClusterParams) -> f64 {
        let m = items.ncols();
        let mut total = 0.0;
        for i in 0..items.nrows() {
            let x = items.row(i).transpose();
            let mut mix = 0.0;
            for j in 0..params.k() {
                let e = &params.e[j];
                let det = e.determinant();
                let inv = e.clone().try_inverse().unwrap();
                let d = &x - params.mu_star.row(j).transpose();
                let quad = (inv * &d).dot(&d);
                let dens = (-0.5 * quad).exp()
                    / ((2.0 * std::f64::consts::PI).powi(m as i32) * det).sqrt();
                mix += params.alpha[j] * dens;
            }
            total += mix.ln();
        }
        total
    }

    #[test]
    fn matches_plain_gaussian_mixture_when_effects_vanish() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let n = 12;
            let m = rng.random_range(1..4usize);
            let k = rng.random_range(1..4usize);
            let items = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let data = DataSet::new(items.clone(), DMatrix::zeros(n, 0)).unwrap();
            let mut p = ClusterParams::zeroed(k, m, 0, 0);
            let mut weights: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.1).collect();
            let wsum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= wsum);
            p.alpha = weights;
            p.mu_star = DMatrix::from_fn(k, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            for j in 0..k {
                let a = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
                p.e[j] = &a * a.transpose() + DMatrix::identity(m, m);
            }
            let ll = log_likelihood(&data, &p, &ModelConfig::new(k)).unwrap();
            let naive = naive_gmm_loglik(&items, &p);
            assert!((ll - naive).abs() < 1e-9, "ll={ll} naive={naive}");
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn covariance_symmetric_and_pd(
                seed in 0u64..1_000,
                m in 1usize..5,
                p_cov in 1usize..3,
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut params = ClusterParams::zeroed(1, m, 0, p_cov);
                let a = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
                params.e[0] = &a * a.transpose() + DMatrix::identity(m, m).scale(0.1);
                for r in 0..m {
                    params.sigma[(0, r)] = rng.random::<f64>() * 2.0 - 1.0;
                }
                params.gamma[0] = DMatrix::from_fn(p_cov, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                let z: Vec<f64> = (0..p_cov).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();

                match covariance(&params, 0, &z) {
                    Ok(cov) => {
                        for r in 0..m {
                            for c in 0..m {
                                prop_assert!((cov[(r, c)] - cov[(c, r)]).abs() < 1e-10);
                            }
                        }
                        prop_assert!(Cholesky::new(cov).is_some());
                    }
                    // Scales below the floor are a legitimate rejection.
                    Err(Error::DegenerateScale { .. }) => {}
                    Err(other) => return Err(TestCaseError::fail(format!("{other}"))),
                }
            }
        }
    }
}
