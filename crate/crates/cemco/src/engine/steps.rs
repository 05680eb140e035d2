//! The expectation, clustering, and maximization steps of one EM iteration.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::DataSet;
use crate::error::Result;
use crate::model::{
    log_components, loglik_and_resp, scales_matrix, Assignment, ClusterParams, ModelConfig,
    Responsibilities,
};

use super::newton::optimize_scales;
use super::{EmState, FitContext};

/// Posterior membership probabilities of every item under `params`, computed
/// in log space. Items whose every component underflows fall back to uniform
/// membership with a logged warning.
pub fn e_step(
    data: &DataSet,
    params: &ClusterParams,
    config: &ModelConfig,
) -> Result<Responsibilities> {
    let ctx = FitContext::new(data, config)?;
    let lc = log_components(data, &ctx.design, &ctx.cov_design, params)?;
    let (_, resp, underflows) = loglik_and_resp(&lc);
    if underflows > 0 {
        log::warn!("{underflows} items underflowed every mixture component");
    }
    Responsibilities::new(resp)
}

/// Hard assignment: each item goes to its most probable cluster, ties broken
/// toward the lowest cluster index.
pub fn c_step(resp: &Responsibilities) -> Assignment {
    let labels = hard_labels(resp.matrix());
    Assignment::new(labels, resp.k()).expect("argmax labels are always in range")
}

pub(crate) fn hard_labels(resp: &DMatrix<f64>) -> Vec<usize> {
    (0..resp.nrows())
        .map(|i| {
            let mut best = 0;
            let mut best_p = resp[(i, 0)];
            for j in 1..resp.ncols() {
                if resp[(i, j)] > best_p {
                    best_p = resp[(i, j)];
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One maximization step from the current state: closed-form updates for the
/// centroids, covariate effects, and cores, the Newton sub-solve for the
/// covariance scales, and hard-count weights. Empty clusters are re-seeded
/// at the worst-fit item.
pub fn m_step(data: &DataSet, state: &EmState, config: &ModelConfig) -> Result<ClusterParams> {
    let ctx = FitContext::new(data, config)?;
    m_step_inner(&ctx, &state.params, state.responsibilities.matrix(), state.assignment.labels())
}

pub(crate) fn m_step_inner(
    ctx: &FitContext,
    params: &ClusterParams,
    resp: &DMatrix<f64>,
    labels: &[usize],
) -> Result<ClusterParams> {
    let n = ctx.data.n_items();
    let m = ctx.data.n_dims();
    let k = ctx.config.k;
    let q = ctx.design.q();
    let p_cov = ctx.cov_design.ncols();
    let items = ctx.data.items();

    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let empties: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();

    let mut new = params.clone();
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let weights = resp.column(j);
        let wsum = weights.sum();
        if wsum <= 0.0 {
            continue;
        }

        // With covariance covariates active the item covariances differ, so
        // the centroid and effect updates must weight by each item's
        // precision L⁻¹E⁻¹L⁻¹; with constant covariance those weights cancel
        // and the updates below reduce to the plain responsibility-weighted
        // means.
        let gls = if p_cov > 0 {
            Some(GlsWorkspace::new(ctx, params, j)?)
        } else {
            None
        };

        // Residuals under the current covariate displacement.
        let mut resid = items.clone();
        if q > 0 {
            resid -= &ctx.design.matrix * &params.beta[j];
        }

        // (a) centroid: precision-weighted mean of the displacement-adjusted
        // items.
        match &gls {
            None => {
                for c in 0..m {
                    let mu = weights.dot(&resid.column(c)) / wsum;
                    new.mu_star[(j, c)] = mu;
                    resid.column_mut(c).add_scalar_mut(-mu);
                }
            }
            Some(ws) => {
                let ones = DVector::from_element(n, 1.0);
                let mu = ws.solve_effect(&weights.into_owned(), &ones, &resid);
                for c in 0..m {
                    new.mu_star[(j, c)] = mu[c];
                    resid.column_mut(c).add_scalar_mut(-mu[c]);
                }
            }
        }

        // (b) covariate effects: one Gauss-Seidel sweep over the design
        // columns, each coordinate update using the freshest residuals.
        if q > 0 {
            let mut beta = params.beta[j].clone();
            let wvec = weights.into_owned();
            for col in 0..q {
                let w = ctx.design.matrix.column(col).into_owned();
                match &gls {
                    None => {
                        let den: f64 = (0..n).map(|i| wvec[i] * w[i] * w[i]).sum();
                        if den <= 0.0 {
                            continue; // all-zero covariate: guarded no-op
                        }
                        for c in 0..m {
                            let num: f64 = (0..n)
                                .map(|i| wvec[i] * w[i] * (resid[(i, c)] + beta[(col, c)] * w[i]))
                                .sum();
                            let updated = num / den;
                            let delta = updated - beta[(col, c)];
                            if delta != 0.0 {
                                for i in 0..n {
                                    resid[(i, c)] -= w[i] * delta;
                                }
                            }
                            beta[(col, c)] = updated;
                        }
                    }
                    Some(ws) => {
                        if (0..n).map(|i| wvec[i] * w[i] * w[i]).sum::<f64>() <= 0.0 {
                            continue;
                        }
                        // Partial residuals: add this column's current
                        // contribution back before re-estimating it.
                        for c in 0..m {
                            let b = beta[(col, c)];
                            if b != 0.0 {
                                for i in 0..n {
                                    resid[(i, c)] += w[i] * b;
                                }
                            }
                        }
                        let updated = ws.solve_effect(&wvec, &w, &resid);
                        for c in 0..m {
                            beta[(col, c)] = updated[c];
                            if updated[c] != 0.0 {
                                for i in 0..n {
                                    resid[(i, c)] -= w[i] * updated[c];
                                }
                            }
                        }
                    }
                }
            }
            new.beta[j] = beta;
        }

        // (c) core: weighted scatter of the scale-whitened residuals,
        // symmetrized against accumulation noise.
        let mut whitened = resid.clone();
        if p_cov > 0 {
            let scales = scales_matrix(params, j, &ctx.cov_design);
            whitened.component_div_assign(&scales);
        }
        let mut core = DMatrix::zeros(m, m);
        for i in 0..n {
            let wi = weights[i];
            if wi == 0.0 {
                continue;
            }
            for r in 0..m {
                let ur = whitened[(i, r)];
                for c in r..m {
                    core[(r, c)] += wi * ur * whitened[(i, c)];
                }
            }
        }
        for r in 0..m {
            for c in r..m {
                let v = core[(r, c)] / wsum;
                core[(r, c)] = v;
                core[(c, r)] = v;
            }
        }
        // Condition the stored core here rather than at evaluation time:
        // the likelihood that the E-step sees must be the likelihood this
        // update maximized, or collapsing clusters make the trace oscillate.
        for r in 0..m {
            core[(r, r)] += crate::model::E_RIDGE;
        }
        new.e[j] = core;

        // (d) covariance scales by damped Newton-Raphson against the new core.
        if p_cov > 0 {
            let sigma0 = new.sigma.row(j).transpose();
            let (sigma, gamma, _converged) = optimize_scales(
                &resid,
                &weights.into_owned(),
                &ctx.cov_design,
                &new.e[j],
                &sigma0,
                &new.gamma[j],
            )?;
            for c in 0..m {
                new.sigma[(j, c)] = sigma[c];
            }
            new.gamma[j] = gamma;
        }
    }

    // (e) weights from the total soft membership. Hard-count weights break
    // the monotonicity of the tracked mixture likelihood whenever the
    // responsibilities stay diffuse, so the weights use the same objective
    // as the convergence criterion; the hard assignment still drives the
    // reported partition and the re-seeding of dead clusters.
    for j in 0..k {
        new.alpha[j] = resp.column(j).sum() / n as f64;
    }

    if !empties.is_empty() {
        reseed_empty_clusters(ctx, params, resp, &empties, &mut new);
    }
    Ok(new)
}

/// Per-item precision pieces for the generalized effect updates when the
/// covariance scales vary across items: Λ_i = L_i⁻¹ E⁻¹ L_i⁻¹.
struct GlsWorkspace {
    inv_scale: DMatrix<f64>,
    core_inv: DMatrix<f64>,
}

impl GlsWorkspace {
    fn new(ctx: &FitContext, params: &ClusterParams, j: usize) -> Result<Self> {
        let mut inv_scale = scales_matrix(params, j, &ctx.cov_design);
        for v in inv_scale.iter_mut() {
            *v = 1.0 / *v;
        }
        let factor = crate::model::factor_spd(&params.e[j])?;
        let core_inv = Cholesky::new(factor.lower.clone() * factor.lower.transpose())
            .ok_or(crate::error::Error::NotPositiveDefinite)?
            .inverse();
        Ok(Self { inv_scale, core_inv })
    }

    /// Solves (Σ_i w_i z_i² Λ_i) b = Σ_i w_i z_i Λ_i r_i for the M-vector
    /// effect b; with constant Λ this is the plain weighted mean Σwzr / Σwz².
    fn solve_effect(&self, w: &DVector<f64>, z: &DVector<f64>, resid: &DMatrix<f64>) -> DVector<f64> {
        let (n, m) = resid.shape();
        let u = resid.component_mul(&self.inv_scale);
        let t = &self.core_inv * u.transpose();
        let mut rhs = DVector::<f64>::zeros(m);
        let mut moment = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            let wz = w[i] * z[i];
            let wz2 = wz * z[i];
            if wz == 0.0 && wz2 == 0.0 {
                continue;
            }
            for r in 0..m {
                let ar = self.inv_scale[(i, r)];
                rhs[r] += wz * ar * t[(r, i)];
                for c in r..m {
                    moment[(r, c)] += wz2 * ar * self.inv_scale[(i, c)];
                }
            }
        }
        let mut lhs = DMatrix::zeros(m, m);
        for r in 0..m {
            for c in r..m {
                let v = self.core_inv[(r, c)] * moment[(r, c)];
                lhs[(r, c)] = v;
                lhs[(c, r)] = v;
            }
        }
        if let Some(chol) = Cholesky::new(lhs.clone()) {
            return chol.solve(&rhs);
        }
        if let Some(sol) = lhs.lu().solve(&rhs) {
            return sol;
        }
        // Degenerate precision sum: fall back to the unweighted form.
        let den: f64 = (0..n).map(|i| w[i] * z[i] * z[i]).sum();
        let mut out = DVector::zeros(m);
        if den > 0.0 {
            for c in 0..m {
                out[c] = (0..n).map(|i| w[i] * z[i] * resid[(i, c)]).sum::<f64>() / den;
            }
        }
        out
    }
}

/// Re-seeds each empty cluster's centroid at a distinct worst-fit item (the
/// lowest maximum responsibility) and gives it weight 1/N, renormalizing the
/// occupied clusters.
fn reseed_empty_clusters(
    ctx: &FitContext,
    params: &ClusterParams,
    resp: &DMatrix<f64>,
    empties: &[usize],
    new: &mut ClusterParams,
) {
    let n = ctx.data.n_items();
    let m = ctx.data.n_dims();
    let q = ctx.design.q();

    if std::env::var_os("CEMCO_TRACE_RESEED").is_some() {
        eprintln!("reseed: {} empty clusters", empties.len());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ma = resp.row(a).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mb = resp.row(b).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ma.partial_cmp(&mb).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });

    for (slot, &j) in empties.iter().enumerate() {
        let item = order[slot % n];
        // Place the centroid so the modeled mean passes through the item at
        // its own covariates.
        for c in 0..m {
            let mut d = 0.0;
            for col in 0..q {
                d += params.beta[j][(col, c)] * ctx.design.matrix[(item, col)];
            }
            new.mu_star[(j, c)] = ctx.data.items()[(item, c)] - d;
        }
    }

    // A dead cluster keeps at least weight 1/N so it can recapture items;
    // the occupied clusters renormalize around the reserved mass.
    for &j in empties {
        new.alpha[j] = new.alpha[j].max(1.0 / n as f64);
    }
    let reserved: f64 = empties.iter().map(|&j| new.alpha[j]).sum();
    let occupied_sum: f64 =
        (0..new.k()).filter(|j| !empties.contains(j)).map(|j| new.alpha[j]).sum();
    if occupied_sum > 0.0 {
        let scale = (1.0 - reserved).max(0.0) / occupied_sum;
        for j in 0..new.k() {
            if !empties.contains(&j) {
                new.alpha[j] *= scale;
            }
        }
    }
    let total: f64 = new.alpha.iter().sum();
    if total > 0.0 && (total - 1.0).abs() > 1e-12 {
        for a in &mut new.alpha {
            *a /= total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::init_random;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, DMatrix};

    #[test]
    fn e_step_single_cluster_is_all_ones() {
        let items = dmatrix![0.1; 0.4; -0.2];
        let data = DataSet::new(items, DMatrix::zeros(3, 0)).unwrap();
        let params = ClusterParams::zeroed(1, 1, 0, 0);
        let resp = e_step(&data, &params, &ModelConfig::new(1)).unwrap();
        for i in 0..3 {
            assert_eq!(resp.matrix()[(i, 0)], 1.0);
        }
    }

    #[test]
    fn e_step_identical_components_split_evenly() {
        let items = dmatrix![0.1; 0.4; -0.2];
        let data = DataSet::new(items, DMatrix::zeros(3, 0)).unwrap();
        let params = ClusterParams::zeroed(2, 1, 0, 0);
        let resp = e_step(&data, &params, &ModelConfig::new(2)).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(resp.matrix()[(i, 0)], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(resp.matrix()[(i, 1)], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn e_step_separated_means_ratio() {
        // mu* = (0, 10), unit variances, x = 0: the far component's weight is
        // the scalar density ratio exp(-50).
        let items = dmatrix![0.0];
        let data = DataSet::new(items, DMatrix::zeros(1, 0)).unwrap();
        let mut params = ClusterParams::zeroed(2, 1, 0, 0);
        params.mu_star = dmatrix![0.0; 10.0];
        let resp = e_step(&data, &params, &ModelConfig::new(2)).unwrap();
        let expected = (-50.0f64).exp() / (1.0 + (-50.0f64).exp());
        assert!((resp.matrix()[(0, 1)] - expected).abs() < 1e-30);
        assert!((resp.matrix()[(0, 1)] - 1.9e-22).abs() < 1e-23);
    }

    #[test]
    fn c_step_argmax_and_ties() {
        let resp = Responsibilities::new(dmatrix![0.2, 0.8; 0.5, 0.5; 1.0, 0.0]).unwrap();
        let labels = c_step(&resp);
        assert_eq!(labels.labels(), &[1, 0, 0]);
    }

    #[test]
    fn c_step_identity_like_matrix() {
        let resp = Responsibilities::new(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(c_step(&resp).labels(), &[0, 1, 2]);
    }

    #[test]
    fn m_step_single_cluster_recovers_gaussian_mle() {
        let items = dmatrix![1.0, 2.0; 3.0, 0.0; 5.0, 4.0; -1.0, 2.0];
        let n = items.nrows();
        let data = DataSet::new(items.clone(), DMatrix::zeros(n, 0)).unwrap();
        let config = ModelConfig::new(1);
        let params = init_random(&data, &config, 0).unwrap();
        let resp = Responsibilities::new(DMatrix::from_element(n, 1, 1.0)).unwrap();
        let state = EmState {
            assignment: c_step(&resp),
            responsibilities: resp,
            params,
            loglik: 0.0,
            iteration: 0,
        };
        let new = m_step(&data, &state, &config).unwrap();

        for c in 0..2 {
            let mean = items.column(c).sum() / n as f64;
            assert_abs_diff_eq!(new.mu_star[(0, c)], mean, epsilon = 1e-12);
        }
        // E is the MLE covariance (denominator N).
        let mean0 = items.column(0).sum() / n as f64;
        let mean1 = items.column(1).sum() / n as f64;
        let mut expect = [[0.0; 2]; 2];
        for i in 0..n {
            let d0 = items[(i, 0)] - mean0;
            let d1 = items[(i, 1)] - mean1;
            expect[0][0] += d0 * d0 / n as f64;
            expect[0][1] += d0 * d1 / n as f64;
            expect[1][1] += d1 * d1 / n as f64;
        }
        assert_abs_diff_eq!(new.e[0][(0, 0)], expect[0][0], epsilon = 1e-6);
        assert_abs_diff_eq!(new.e[0][(0, 1)], expect[0][1], epsilon = 1e-6);
        assert_abs_diff_eq!(new.e[0][(1, 1)], expect[1][1], epsilon = 1e-6);
        assert_eq!(new.alpha, vec![1.0]);
    }

    #[test]
    fn m_step_zero_covariate_is_a_guarded_noop() {
        let items = dmatrix![1.0; 2.0; 3.0];
        let cov = dmatrix![0.0; 0.0; 0.0];
        let data = DataSet::new(items.clone(), cov).unwrap();
        let config = ModelConfig::new(1).with_centroid_covariates(vec![0]);
        let mut params = init_random(&data, &config, 0).unwrap();
        params.beta[0][(0, 0)] = 0.7;
        let resp = Responsibilities::new(DMatrix::from_element(3, 1, 1.0)).unwrap();
        let state = EmState {
            assignment: c_step(&resp),
            responsibilities: resp,
            params,
            loglik: 0.0,
            iteration: 0,
        };
        let new = m_step(&data, &state, &config).unwrap();
        assert_eq!(new.beta[0][(0, 0)], 0.7);
        assert_abs_diff_eq!(new.mu_star[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn m_step_fixed_point_fits_exact_regression() {
        // Single cluster, x = z exactly with z in {-1, 1}: iterating the
        // update converges to mu* = 0, beta = 1.
        let items = dmatrix![-1.0; 1.0; -1.0; 1.0];
        let cov = items.clone();
        let data = DataSet::new(items, cov).unwrap();
        let config = ModelConfig::new(1).with_centroid_covariates(vec![0]);
        let mut params = init_random(&data, &config, 1).unwrap();
        let resp = Responsibilities::new(DMatrix::from_element(4, 1, 1.0)).unwrap();
        let assignment = c_step(&resp);
        for _ in 0..200 {
            let state = EmState {
                params: params.clone(),
                responsibilities: resp.clone(),
                assignment: assignment.clone(),
                loglik: 0.0,
                iteration: 0,
            };
            params = m_step(&data, &state, &config).unwrap();
        }
        assert_abs_diff_eq!(params.mu_star[(0, 0)], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(params.beta[0][(0, 0)], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn m_step_reseeds_empty_cluster() {
        let items = dmatrix![0.0; 0.1; 10.0; 10.1];
        let data = DataSet::new(items, DMatrix::zeros(4, 0)).unwrap();
        let config = ModelConfig::new(2);
        let params = init_random(&data, &config, 0).unwrap();
        // All responsibility on cluster 0 leaves cluster 1 empty.
        let resp = Responsibilities::new(DMatrix::from_fn(4, 2, |_, j| if j == 0 { 1.0 } else { 0.0 }))
            .unwrap();
        let state = EmState {
            assignment: c_step(&resp),
            responsibilities: resp,
            params,
            loglik: 0.0,
            iteration: 0,
        };
        let new = m_step(&data, &state, &config).unwrap();
        assert_abs_diff_eq!(new.alpha[1], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(new.alpha.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
