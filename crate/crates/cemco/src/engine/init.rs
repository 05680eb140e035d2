//! Parameter initialization: uniform weights with item-sampled centroids,
//! or a regression-residual warm start that seeds the common covariate slope.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::model::{ClusterParams, ModelConfig};

use super::FitContext;

/// Random initialization: α uniform, centroids at K distinct items sampled
/// without replacement, zero covariate effects, unit scales, and diagonal
/// cores from the per-dimension sample variances. Deterministic given `seed`.
pub fn init_random(data: &DataSet, config: &ModelConfig, seed: u64) -> Result<ClusterParams> {
    let ctx = FitContext::new(data, config)?;
    init_random_inner(&ctx, seed)
}

pub(crate) fn init_random_inner(ctx: &FitContext, seed: u64) -> Result<ClusterParams> {
    let (n, k) = (ctx.data.n_items(), ctx.config.k);
    if k > n {
        return Err(Error::TooManyClusters { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seed_from_rows(ctx, &mut rng, ctx.data.items())
}

/// Regression-residual warm start: fit least squares of every item dimension
/// on the centroid design, scale the common slope by `shrink`, seed the
/// centroids on the displacement-adjusted items, and start every cluster's β
/// at the scaled slope. Falls back to [`init_random`] when the design is
/// empty or rank-deficient. With `shrink = 0` the result is identical to
/// [`init_random`].
pub fn init_residual(
    data: &DataSet,
    config: &ModelConfig,
    seed: u64,
    shrink: f64,
) -> Result<ClusterParams> {
    let ctx = FitContext::new(data, config)?;
    init_residual_inner(&ctx, seed, shrink)
}

pub(crate) fn init_residual_inner(ctx: &FitContext, seed: u64, shrink: f64) -> Result<ClusterParams> {
    let (n, k) = (ctx.data.n_items(), ctx.config.k);
    if k > n {
        return Err(Error::TooManyClusters { k, n });
    }
    let q = ctx.design.q();
    if q == 0 {
        return init_random_inner(ctx, seed);
    }

    // Least squares [1 | W] -> X for the common slope across clusters.
    let mut a = DMatrix::zeros(n, q + 1);
    a.column_mut(0).fill(1.0);
    a.view_mut((0, 1), (n, q)).copy_from(&ctx.design.matrix);
    let svd = a.clone().svd(true, true);
    let eps = 1e-10 * n as f64;
    if svd.rank(eps) < q + 1 {
        return init_random_inner(ctx, seed);
    }
    let coeffs = match svd.solve(ctx.data.items(), eps) {
        Ok(c) => c,
        Err(_) => return init_random_inner(ctx, seed),
    };
    let mut slope = coeffs.view((1, 0), (q, ctx.data.n_dims())).into_owned();
    slope.scale_mut(shrink);

    let adjusted = ctx.data.items() - &ctx.design.matrix * &slope;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = seed_from_rows(ctx, &mut rng, &adjusted)?;
    for beta in &mut params.beta {
        beta.copy_from(&slope);
    }
    Ok(params)
}

/// Shared seeding: centroids from K distinct rows of `rows`, cores from its
/// per-dimension variances (floored away from zero).
fn seed_from_rows(
    ctx: &FitContext,
    rng: &mut ChaCha8Rng,
    rows: &DMatrix<f64>,
) -> Result<ClusterParams> {
    let (n, m, k) = (rows.nrows(), rows.ncols(), ctx.config.k);
    let q = ctx.design.q();
    let p_cov = ctx.cov_design.ncols();
    let mut params = ClusterParams::zeroed(k, m, q, p_cov);

    let picks = rand::seq::index::sample(rng, n, k);
    for (j, idx) in picks.iter().enumerate() {
        for c in 0..m {
            params.mu_star[(j, c)] = rows[(idx, c)];
        }
    }

    let mut core = DMatrix::zeros(m, m);
    for c in 0..m {
        let col = rows.column(c);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        core[(c, c)] = var.max(1e-8);
    }
    for e in &mut params.e {
        e.copy_from(&core);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn small_data() -> DataSet {
        let items = dmatrix![0.0, 0.0; 1.0, 1.0; 2.0, 0.5; 3.0, 2.0];
        let cov = dmatrix![0.0; 1.0; 2.0; 3.0];
        DataSet::new(items, cov).unwrap()
    }

    #[test]
    fn single_cluster_uses_sampled_item() {
        let data = small_data();
        let config = ModelConfig::new(1);
        let p = init_random(&data, &config, 3).unwrap();
        assert_eq!(p.alpha, vec![1.0]);
        let mu: Vec<f64> = p.mu_star.row(0).iter().copied().collect();
        let found = (0..4).any(|i| {
            (0..2).all(|c| data.items()[(i, c)] == mu[c])
        });
        assert!(found, "centroid must be one of the items");
    }

    #[test]
    fn deterministic_given_seed() {
        let data = small_data();
        let config = ModelConfig::new(2).with_centroid_covariates(vec![0]);
        let a = init_random(&data, &config, 11).unwrap();
        let b = init_random(&data, &config, 11).unwrap();
        assert_eq!(a, b);
        let c = init_residual(&data, &config, 11, 0.7).unwrap();
        let d = init_residual(&data, &config, 11, 0.7).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn k_equals_n_exhausts_items() {
        let data = small_data();
        let config = ModelConfig::new(4);
        let p = init_random(&data, &config, 5).unwrap();
        let mut used: Vec<usize> = (0..4)
            .map(|j| {
                (0..4)
                    .find(|&i| (0..2).all(|c| data.items()[(i, c)] == p.mu_star[(j, c)]))
                    .expect("each centroid is an item")
            })
            .collect();
        used.sort_unstable();
        assert_eq!(used, vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_shrink_matches_init_random() {
        let data = small_data();
        let config = ModelConfig::new(2).with_centroid_covariates(vec![0]);
        let random = init_random(&data, &config, 9).unwrap();
        let residual = init_residual(&data, &config, 9, 0.0).unwrap();
        assert_eq!(random, residual);
    }

    #[test]
    fn recovers_strong_common_slope_within_band() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 200;
        let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let items = DMatrix::from_fn(n, 1, |i, _| 2.0 * z[i] + 0.05 * (rng.random::<f64>() - 0.5));
        let cov = DMatrix::from_fn(n, 1, |i, _| z[i]);
        let data = DataSet::new(items, cov).unwrap();
        let config = ModelConfig::new(2).with_centroid_covariates(vec![0]);
        let p = init_residual(&data, &config, 1, 1.0).unwrap();
        let b = p.beta[0][(0, 0)];
        assert!(b > 1.0 && b < 4.0, "slope {b} outside the 2x sanity band of 2.0");
    }

    #[test]
    fn rank_deficient_design_falls_back() {
        let items = dmatrix![0.0; 1.0; 2.0; 3.0];
        let cov = dmatrix![1.0, 1.0; 1.0, 1.0; 1.0, 1.0; 1.0, 1.0];
        let data = DataSet::new(items, cov).unwrap();
        let config = ModelConfig::new(2).with_centroid_covariates(vec![0, 1]);
        let viaresidual = init_residual(&data, &config, 4, 1.0).unwrap();
        let viarandom = init_random(&data, &config, 4).unwrap();
        assert_eq!(viaresidual, viarandom);
    }
}
