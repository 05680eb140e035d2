//! Hypothesis tests for covariate effects (likelihood ratio and parametric
//! bootstrap), parameter counting, BIC, and cluster-count selection.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::DataSet;
use crate::design::build_centroid_design;
use crate::engine::{fit, fit_with_params};
use crate::error::{Error, Result};
use crate::model::{centroid, scales_clamped, ClusterParams, FitResult, ModelConfig};
use crate::splines::SplineSpec;
use crate::util::mix_seed;

/// Restart budget for each bootstrap-replicate fit; the replicates only need
/// the shape of the null distribution, not globally optimal fits.
pub const BOOTSTRAP_RESTARTS: usize = 5;

/// Which parameter block a covariate test targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestTarget {
    Centroid,
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    Lrt,
    Bootstrap,
}

/// Outcome of a covariate-effect test: the statistic D = 2(lnL₁ − lnL₀),
/// its reference degrees of freedom, and the p-value, together with the
/// nested fit pair that produced it.
#[derive(Debug, Clone)]
pub struct TestResult {
    pub statistic_d: f64,
    pub df: usize,
    pub p_value: f64,
    pub method: TestMethod,
    pub null_fit: FitResult,
    pub alt_fit: FitResult,
    pub bootstrap_samples: Option<usize>,
}

/// One row of a BIC selection sweep. `final_loglik`/`bic` are `None` when
/// the fit for that cluster count failed.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionRow {
    pub k: usize,
    pub param_count: usize,
    pub final_loglik: Option<f64>,
    pub bic: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionTable {
    pub rows: Vec<SelectionRow>,
    pub chosen_k: usize,
}

/// Number of estimated parameters R = K(1 + (3+P)M + M²); with a spline,
/// P(S+B) replaces P. This is the count the BIC definition uses, including
/// its 2KM accounting of the covariance scales.
pub fn param_count(k: usize, m: usize, p: usize, spline: Option<&SplineSpec>) -> usize {
    let q = spline.map_or(p, |s| p * s.df());
    k * (1 + (3 + q) * m + m * m)
}

/// Exact parameter count: the covariance scales contribute KM for σ plus
/// KM·P_cov for γ, instead of the flat 2KM of [`param_count`]. The two agree
/// when exactly one covariate drives the covariance.
pub fn param_count_exact(
    k: usize,
    m: usize,
    p: usize,
    spline: Option<&SplineSpec>,
    p_cov: usize,
) -> usize {
    let q = spline.map_or(p, |s| p * s.df());
    k * (1 + (1 + q) * m + m * m) + k * m + k * m * p_cov
}

/// BIC = ln(N)·R − 2·lnL̂; smaller is better.
pub fn bic(final_loglik: f64, n: usize, r: usize) -> f64 {
    (n as f64).ln() * r as f64 - 2.0 * final_loglik
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    match ChiSquared::new(df as f64) {
        Ok(d) => d.sf(x),
        Err(_) => f64::NAN,
    }
}

/// Reference degrees of freedom for a single-covariate test: KM in the
/// linear case (either target), KM(S+B) for a spline centroid effect.
pub fn test_df(config: &ModelConfig, m: usize, target: TestTarget) -> usize {
    match (target, &config.spline) {
        (TestTarget::Centroid, Some(spec)) => config.k * m * spec.df(),
        _ => config.k * m,
    }
}

fn null_config(config: &ModelConfig, covariate: usize, target: TestTarget) -> Result<ModelConfig> {
    let mut null = config.clone();
    let list = match target {
        TestTarget::Centroid => &mut null.centroid_covariates,
        TestTarget::Covariance => &mut null.covariance_covariates,
    };
    let pos = list.iter().position(|&l| l == covariate).ok_or_else(|| {
        Error::Inference(format!("covariate {covariate} is not active for the tested target"))
    })?;
    list.remove(pos);
    Ok(null)
}

/// Embeds a null-model solution into the alternative parameter space: the
/// tested covariate's block is zero, everything else carries over.
fn embed_null_params(
    data: &DataSet,
    null: &ClusterParams,
    config: &ModelConfig,
    covariate: usize,
    target: TestTarget,
) -> Result<ClusterParams> {
    let mut out = null.clone();
    match target {
        TestTarget::Centroid => {
            let design = build_centroid_design(data, config)?;
            let pos = config
                .centroid_covariates
                .iter()
                .position(|&l| l == covariate)
                .expect("covariate verified active");
            let (start, width) = design.spans[pos];
            let q = design.q();
            let m = null.m();
            for j in 0..null.k() {
                let mut beta = DMatrix::zeros(q, m);
                for row in 0..start {
                    beta.set_row(row, &null.beta[j].row(row));
                }
                for row in start + width..q {
                    beta.set_row(row, &null.beta[j].row(row - width));
                }
                out.beta[j] = beta;
            }
        }
        TestTarget::Covariance => {
            let pos = config
                .covariance_covariates
                .iter()
                .position(|&l| l == covariate)
                .expect("covariate verified active");
            let p_cov = config.covariance_covariates.len();
            let m = null.m();
            for j in 0..null.k() {
                let mut gamma = DMatrix::zeros(p_cov, m);
                for row in 0..pos {
                    gamma.set_row(row, &null.gamma[j].row(row));
                }
                for row in pos + 1..p_cov {
                    gamma.set_row(row, &null.gamma[j].row(row - 1));
                }
                out.gamma[j] = gamma;
            }
        }
    }
    Ok(out)
}

/// Fits the nested pair for one covariate: the null constrains the tested
/// effect to zero. The alternative takes the better of its own multi-restart
/// fit and a run warm-started from the null solution, which keeps D ≥ 0.
fn nested_fits(
    data: &DataSet,
    config: &ModelConfig,
    covariate: usize,
    target: TestTarget,
) -> Result<(FitResult, FitResult)> {
    let null_cfg = null_config(config, covariate, target)?;
    let null_fit = fit(data, &null_cfg)?;
    let cold = fit(data, config)?;
    let warm_init = embed_null_params(data, &null_fit.params, config, covariate, target)?;
    let warm = fit_with_params(data, config, &warm_init)?;
    let alt = if warm.final_loglik > cold.final_loglik { warm } else { cold };
    Ok((null_fit, alt))
}

fn statistic(null_fit: &FitResult, alt_fit: &FitResult) -> f64 {
    let d = 2.0 * (alt_fit.final_loglik - null_fit.final_loglik);
    debug_assert!(
        d >= -1e-6 * alt_fit.final_loglik.abs().max(1.0),
        "warm-started alternative fell below the null: D = {d}"
    );
    d.max(0.0)
}

/// Likelihood ratio test for the effect of one covariate on the chosen
/// target, with a chi-square reference distribution.
pub fn lrt(
    data: &DataSet,
    config: &ModelConfig,
    covariate: usize,
    target: TestTarget,
) -> Result<TestResult> {
    let (null_fit, alt_fit) = nested_fits(data, config, covariate, target)?;
    if !null_fit.converged || !alt_fit.converged {
        return Err(Error::Inference("a nested fit did not converge within max_iter".into()));
    }
    let d = statistic(&null_fit, &alt_fit);
    let df = test_df(config, data.n_dims(), target);
    Ok(TestResult {
        statistic_d: d,
        df,
        p_value: chi_square_sf(d, df),
        method: TestMethod::Lrt,
        null_fit,
        alt_fit,
        bootstrap_samples: None,
    })
}

/// Parametric bootstrap test: synthetic data sets are drawn from the fitted
/// null model (each item keeps its own covariates) and the statistic is
/// recomputed on every replicate; p = (1 + #{D* ≥ D}) / (n_boot + 1).
pub fn bootstrap_test(
    data: &DataSet,
    config: &ModelConfig,
    covariate: usize,
    target: TestTarget,
    n_boot: usize,
    seed: u64,
) -> Result<TestResult> {
    if n_boot < 19 {
        return Err(Error::Inference(format!(
            "n_boot = {n_boot} gives too coarse a p-value resolution; need at least 19"
        )));
    }
    let (null_fit, alt_fit) = nested_fits(data, config, covariate, target)?;
    if !null_fit.converged || !alt_fit.converged {
        return Err(Error::Inference("a nested fit did not converge within max_iter".into()));
    }
    let d_obs = statistic(&null_fit, &alt_fit);

    let null_cfg = null_config(config, covariate, target)?;
    let sampler = NullSampler::new(data, &null_cfg, &null_fit.params)?;

    let stats: Vec<Result<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let draw_seed = mix_seed(seed, 2 * b as u64 + 1);
            let fit_seed = mix_seed(seed, 2 * b as u64 + 2);
            let synthetic = sampler.draw(draw_seed)?;
            let mut boot_null_cfg = null_cfg.clone();
            boot_null_cfg.restarts = BOOTSTRAP_RESTARTS;
            boot_null_cfg.seed = fit_seed;
            let mut boot_alt_cfg = config.clone();
            boot_alt_cfg.restarts = BOOTSTRAP_RESTARTS;
            boot_alt_cfg.seed = fit_seed;

            let boot_null = fit(&synthetic, &boot_null_cfg)?;
            let cold = fit(&synthetic, &boot_alt_cfg)?;
            let warm_init =
                embed_null_params(&synthetic, &boot_null.params, &boot_alt_cfg, covariate, target)?;
            let warm = fit_with_params(&synthetic, &boot_alt_cfg, &warm_init)?;
            let alt = if warm.final_loglik > cold.final_loglik { warm } else { cold };
            Ok(statistic(&boot_null, &alt))
        })
        .collect();

    let mut exceed = 0usize;
    let mut completed = 0usize;
    for s in stats {
        match s {
            Ok(d) => {
                completed += 1;
                if d >= d_obs {
                    exceed += 1;
                }
            }
            Err(err) => log::warn!("bootstrap replicate failed: {err}"),
        }
    }
    if completed == 0 {
        return Err(Error::Inference("every bootstrap replicate failed".into()));
    }
    let p_value = (1 + exceed) as f64 / (completed + 1) as f64;
    let df = test_df(config, data.n_dims(), target);
    Ok(TestResult {
        statistic_d: d_obs,
        df,
        p_value,
        method: TestMethod::Bootstrap,
        null_fit,
        alt_fit,
        bootstrap_samples: Some(n_boot),
    })
}

/// Draws synthetic data sets from a fitted model, conditional on the real
/// covariates: each item samples its cluster from the fitted weights, then
/// its value from that cluster's covariate-specific Gaussian.
struct NullSampler<'a> {
    data: &'a DataSet,
    params: &'a ClusterParams,
    design: DMatrix<f64>,
    cov_design: DMatrix<f64>,
    /// Pre-factored covariances for clusters without covariance covariates.
    fixed_chol: Vec<Option<DMatrix<f64>>>,
}

impl<'a> NullSampler<'a> {
    fn new(data: &'a DataSet, config: &ModelConfig, params: &'a ClusterParams) -> Result<Self> {
        let design = build_centroid_design(data, config)?.matrix;
        let cov_design = crate::design::build_covariance_design(data, config);
        let fixed_chol = if cov_design.ncols() == 0 {
            params
                .e
                .iter()
                .map(|e| Cholesky::new(e.clone()).map(|c| c.unpack()))
                .collect()
        } else {
            vec![None; params.k()]
        };
        Ok(Self { data, params, design, cov_design, fixed_chol })
    }

    fn draw(&self, seed: u64) -> Result<DataSet> {
        let n = self.data.n_items();
        let m = self.data.n_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = DMatrix::zeros(n, m);
        let std_normal = StandardNormal;
        for i in 0..n {
            let u: f64 = rand::Rng::random(&mut rng);
            let mut acc = 0.0;
            let mut cluster = self.params.k() - 1;
            for (j, &a) in self.params.alpha.iter().enumerate() {
                acc += a;
                if u < acc {
                    cluster = j;
                    break;
                }
            }
            let design_row: Vec<f64> = self.design.row(i).iter().copied().collect();
            let mu = centroid(self.params, cluster, &design_row)?;
            let noise = DVector::from_fn(m, |_, _| std_normal.sample(&mut rng));
            let sample = match &self.fixed_chol[cluster] {
                Some(lower) => mu + lower * noise,
                None => {
                    let zc: Vec<f64> = self.cov_design.row(i).iter().copied().collect();
                    let scale = scales_clamped(self.params, cluster, &zc);
                    let mut cov = self.params.e[cluster].clone();
                    for r in 0..m {
                        for c in 0..m {
                            cov[(r, c)] *= scale[r] * scale[c];
                        }
                    }
                    let lower = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite)?.unpack();
                    mu + lower * noise
                }
            };
            for c in 0..m {
                items[(i, c)] = sample[c];
            }
        }
        DataSet::with_names(
            items,
            self.data.covariates().clone(),
            self.data.covariate_names().to_vec(),
            None,
        )
    }
}

/// Fits every cluster count in `k_min..=k_max` and selects the BIC
/// minimizer; ties break toward the smaller count. Failed fits leave their
/// row unusable and selection runs over the rest.
pub fn select_k(
    data: &DataSet,
    config: &ModelConfig,
    k_min: usize,
    k_max: usize,
) -> Result<SelectionTable> {
    if k_min < 1 || k_min > k_max {
        return Err(Error::Inference(format!("invalid cluster range {k_min}..={k_max}")));
    }
    if k_max > data.n_items() {
        return Err(Error::TooManyClusters { k: k_max, n: data.n_items() });
    }
    let fits: Vec<(usize, Result<FitResult>)> = (k_min..=k_max)
        .into_par_iter()
        .map(|k| {
            let mut cfg = config.clone();
            cfg.k = k;
            (k, fit(data, &cfg))
        })
        .collect();

    let mut rows = Vec::with_capacity(fits.len());
    for (k, outcome) in fits {
        let r = param_count(
            k,
            data.n_dims(),
            config.centroid_covariates.len(),
            config.spline.as_ref(),
        );
        match outcome {
            Ok(f) => rows.push(SelectionRow {
                k,
                param_count: r,
                final_loglik: Some(f.final_loglik),
                bic: Some(f.bic),
            }),
            Err(err) => {
                log::warn!("fit failed for k = {k}: {err}");
                rows.push(SelectionRow { k, param_count: r, final_loglik: None, bic: None });
            }
        }
    }
    let chosen_k = rows
        .iter()
        .filter_map(|row| row.bic.map(|b| (row.k, b)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
        .map(|(k, _)| k)
        .ok_or_else(|| Error::Inference("every fit in the selection sweep failed".into()))?;
    Ok(SelectionTable { rows, chosen_k })
}
