//! The classification-EM fitter: initialization, expectation, hard
//! clustering, maximization (closed forms plus a Newton-Raphson sub-solve
//! for the covariance scales), convergence, and multi-restart selection.

mod init;
mod newton;
mod steps;

pub use init::{init_random, init_residual};
pub use newton::newton_scales;
pub use steps::{c_step, e_step, m_step};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::DataSet;
use crate::design::{build_centroid_design, build_covariance_design, CentroidDesign};
use crate::error::{Error, Result};
use crate::inference::param_count;
use crate::model::{
    log_components, loglik_and_resp, Assignment, ClusterParams, FitResult, ModelConfig,
    Responsibilities,
};

/// Transient state of one EM iteration.
#[derive(Debug, Clone)]
pub struct EmState {
    pub params: ClusterParams,
    pub responsibilities: Responsibilities,
    pub assignment: Assignment,
    pub loglik: f64,
    pub iteration: usize,
}

/// Precomputed per-fit quantities shared by every step.
pub(crate) struct FitContext<'a> {
    pub data: &'a DataSet,
    pub config: &'a ModelConfig,
    pub design: CentroidDesign,
    pub cov_design: DMatrix<f64>,
}

impl<'a> FitContext<'a> {
    pub fn new(data: &'a DataSet, config: &'a ModelConfig) -> Result<Self> {
        config.validate(data.n_covariates())?;
        let design = build_centroid_design(data, config)?;
        let cov_design = build_covariance_design(data, config);
        Ok(Self { data, config, design, cov_design })
    }
}

pub(crate) struct EmOutcome {
    pub params: ClusterParams,
    pub resp: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
}

/// One full EM run from explicit starting parameters.
pub(crate) fn em_run(ctx: &FitContext, mut params: ClusterParams) -> Result<EmOutcome> {
    let mut trace = Vec::new();
    let mut converged = false;
    let mut n_iter = 0;
    let mut underflow_total = 0;

    let lc = log_components(ctx.data, &ctx.design, &ctx.cov_design, &params)?;
    let (mut ll, mut resp, uf) = loglik_and_resp(&lc);
    underflow_total += uf;
    if ll.is_nan() {
        return Err(Error::InvalidInput("log-likelihood is NaN at initialization".into()));
    }
    trace.push(ll);

    for iter in 0..ctx.config.max_iter {
        debug_assert!(check_iteration_invariants(&params, &resp));
        let labels = steps::hard_labels(&resp);
        params = steps::m_step_inner(ctx, &params, &resp, &labels)?;

        let lc = log_components(ctx.data, &ctx.design, &ctx.cov_design, &params)?;
        let (new_ll, new_resp, uf) = loglik_and_resp(&lc);
        underflow_total += uf;
        if new_ll.is_nan() {
            return Err(Error::InvalidInput(format!(
                "log-likelihood became NaN at iteration {iter}"
            )));
        }
        trace.push(new_ll);
        n_iter = iter + 1;
        let delta = new_ll - ll;
        ll = new_ll;
        resp = new_resp;
        if delta.abs() < ctx.config.loglik_rel_tol * ll.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    if underflow_total > 0 {
        log::warn!("{underflow_total} expectation rows underflowed across the run (uniform fallback)");
    }
    let labels = steps::hard_labels(&resp);
    Ok(EmOutcome { params, resp, labels, trace, converged, n_iter })
}

fn check_iteration_invariants(params: &ClusterParams, resp: &DMatrix<f64>) -> bool {
    for i in 0..resp.nrows() {
        let s: f64 = resp.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return false;
        }
    }
    let alpha_sum: f64 = params.alpha.iter().sum();
    if (alpha_sum - 1.0).abs() > 1e-8 {
        return false;
    }
    params
        .e
        .iter()
        .all(|e| crate::model::factor_spd(e).is_ok())
}

fn outcome_to_fit(ctx: &FitContext, outcome: EmOutcome, restart_index: usize) -> Result<FitResult> {
    let final_loglik = *outcome.trace.last().expect("trace is never empty");
    let r = param_count(
        ctx.config.k,
        ctx.data.n_dims(),
        ctx.config.centroid_covariates.len(),
        ctx.config.spline.as_ref(),
    );
    let bic = crate::inference::bic(final_loglik, ctx.data.n_items(), r);
    Ok(FitResult {
        assignment: Assignment::new(outcome.labels, ctx.config.k)?,
        responsibilities: Responsibilities::new(outcome.resp)?,
        params: outcome.params,
        loglik_trace: outcome.trace,
        final_loglik,
        bic,
        converged: outcome.converged,
        n_iter: outcome.n_iter,
        restart_index,
    })
}

/// Fits the model with multi-restart selection: restart 0 uses the
/// regression-residual warm start (when the model has centroid covariates),
/// the rest use random initialization, each seeded as `seed + r`. The
/// restart with the highest final log-likelihood wins; ties go to the lowest
/// restart index, keeping the result deterministic.
pub fn fit(data: &DataSet, config: &ModelConfig) -> Result<FitResult> {
    let ctx = FitContext::new(data, config)?;
    fit_with_ctx(&ctx)
}

pub(crate) fn fit_with_ctx(ctx: &FitContext) -> Result<FitResult> {
    let (data, config) = (ctx.data, ctx.config);
    if config.k > data.n_items() {
        return Err(Error::TooManyClusters { k: config.k, n: data.n_items() });
    }
    let r = param_count(
        config.k,
        data.n_dims(),
        config.centroid_covariates.len(),
        config.spline.as_ref(),
    );
    if r > data.n_items() {
        log::warn!(
            "model has {r} parameters for {} items; estimates may be unstable",
            data.n_items()
        );
    }

    let runs: Vec<Result<EmOutcome>> = (0..config.restarts)
        .into_par_iter()
        .map(|restart| {
            let seed = config.seed.wrapping_add(restart as u64);
            let init = if restart == 0 && ctx.design.q() > 0 {
                init::init_residual_inner(ctx, seed, 1.0)?
            } else {
                init::init_random_inner(ctx, seed)?
            };
            em_run(ctx, init)
        })
        .collect();

    let mut best: Option<(usize, EmOutcome)> = None;
    for (idx, run) in runs.into_iter().enumerate() {
        match run {
            Ok(outcome) => {
                let ll = *outcome.trace.last().unwrap();
                let better = match &best {
                    None => true,
                    Some((_, b)) => ll > *b.trace.last().unwrap(),
                };
                if better {
                    best = Some((idx, outcome));
                }
            }
            Err(err) => log::warn!("restart {idx} failed: {err}"),
        }
    }
    let (idx, outcome) = best.ok_or(Error::AllRestartsFailed(config.restarts))?;
    outcome_to_fit(ctx, outcome, idx)
}

/// Runs a single EM pass from explicit initial parameters (no restarts).
/// Useful for warm starts and for forcing identical seeding in experiments.
pub fn fit_with_params(
    data: &DataSet,
    config: &ModelConfig,
    init: &ClusterParams,
) -> Result<FitResult> {
    let ctx = FitContext::new(data, config)?;
    if config.k > data.n_items() {
        return Err(Error::TooManyClusters { k: config.k, n: data.n_items() });
    }
    let outcome = em_run(&ctx, init.clone())?;
    outcome_to_fit(&ctx, outcome, 0)
}
