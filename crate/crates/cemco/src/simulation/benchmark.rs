//! Benchmark runner: paired method comparisons on shared draws, BIC
//! selection frequencies, and covariate-test p-values under the generated
//! effect and under a null regeneration.

use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{cem_dimension_fit, cem_fit, cem_partial_fit};
use crate::engine::fit;
use crate::error::{Error, Result};
use crate::inference::{lrt, select_k, TestTarget};
use crate::model::ModelConfig;
use crate::splines::SplineSpec;
use crate::util::mix_seed;

use super::{
    adjusted_rand_index, gen_scenario1, gen_scenario2, gen_scenario3, regenerate, LabeledDataSet,
    scenario1_default_beta,
};

/// The three simulation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scenario {
    /// Linear covariate effects on the centroids (K=2, M=5, P=5).
    One,
    /// A covariate scaling the covariances (K=4, M=2, P=1).
    Two,
    /// A quadratic covariate effect on the centroids (K=4, M=2, P=1).
    Three,
}

impl Scenario {
    pub fn index(self) -> u8 {
        match self {
            Scenario::One => 1,
            Scenario::Two => 2,
            Scenario::Three => 3,
        }
    }

    /// The canonical model for the scenario's own generating structure.
    pub fn cemco_config(self, restarts: usize, seed: u64) -> ModelConfig {
        match self {
            Scenario::One => ModelConfig::new(2)
                .with_centroid_covariates(vec![0, 1, 2, 3, 4])
                .with_restarts(restarts)
                .with_seed(seed),
            Scenario::Two => ModelConfig::new(4)
                .with_centroid_covariates(vec![0])
                .with_covariance_covariates(vec![0])
                .with_restarts(restarts)
                .with_seed(seed),
            Scenario::Three => ModelConfig::new(4)
                .with_centroid_covariates(vec![0])
                .with_spline(SplineSpec { knots: 1, degree: 3 })
                .with_restarts(restarts)
                .with_seed(seed),
        }
    }

    pub fn true_k(self) -> usize {
        match self {
            Scenario::One => 2,
            _ => 4,
        }
    }

    fn default_k_range(self) -> (usize, usize) {
        match self {
            Scenario::One => (1, 4),
            _ => (2, 6),
        }
    }

    fn test_target(self) -> TestTarget {
        match self {
            Scenario::Two => TestTarget::Covariance,
            _ => TestTarget::Centroid,
        }
    }

    fn generate(self, n: usize, seed: u64, beta_scale: f64) -> Result<LabeledDataSet> {
        match self {
            Scenario::One => {
                let beta: Vec<_> =
                    scenario1_default_beta().into_iter().map(|b| b.scale(beta_scale)).collect();
                gen_scenario1(n, seed, Some(&beta))
            }
            Scenario::Two => gen_scenario2(n, seed),
            Scenario::Three => {
                let mut beta = nalgebra::DMatrix::zeros(4, 2);
                let defaults = super::scenario2_beta();
                for j in 0..4 {
                    for c in 0..2 {
                        beta[(j, c)] = defaults[j][(0, c)] * beta_scale;
                    }
                }
                gen_scenario3(n, seed, Some(&beta))
            }
        }
    }

    /// The matching null-hypothesis draw: centroid effects zeroed, and for
    /// the covariance scenario the scale effects zeroed as well.
    fn generate_null(self, n: usize, seed: u64) -> Result<LabeledDataSet> {
        let with_effect = self.generate(n, seed, 1.0)?;
        let mut params = with_effect.generator_params;
        params.seed = seed;
        for b in &mut params.beta {
            b.fill(0.0);
        }
        if let Some(quad) = &mut params.beta_quadratic {
            for b in quad {
                b.fill(0.0);
            }
        }
        if self.test_target() == TestTarget::Covariance {
            for g in &mut params.gamma {
                g.fill(0.0);
            }
        }
        regenerate(&params)
    }
}

/// Clustering methods the benchmark can compare on the same draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The covariate-adjusted model with the scenario's canonical
    /// configuration (spline-based for scenario 3).
    Cemco,
    Cem,
    CemDimension,
    CemPartial,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cemco => "cemco",
            Method::Cem => "cem",
            Method::CemDimension => "cem-dimension",
            Method::CemPartial => "cem-partial",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "cemco" => Some(Method::Cemco),
            "cem" => Some(Method::Cem),
            "cem-dimension" => Some(Method::CemDimension),
            "cem-partial" => Some(Method::CemPartial),
            _ => None,
        }
    }
}

/// Toggles and budgets for a benchmark sweep; the default runs everything.
#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    /// Restart budget per fit.
    pub restarts: usize,
    /// Cluster range of the BIC selection sweep; `None` uses the scenario
    /// default (1..=4 for scenario 1, 2..=6 otherwise).
    pub k_range: Option<(usize, usize)>,
    pub run_selection: bool,
    /// Run the covariate test on the generated (alternative) data.
    pub test_h1: bool,
    /// Run the covariate test on a matching null regeneration.
    pub test_h0: bool,
    /// Multiplier on the scenario's centroid effects (scenarios 1 and 3).
    pub beta_scale: f64,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            k_range: None,
            run_selection: true,
            test_h1: true,
            test_h0: true,
            beta_scale: 1.0,
        }
    }
}

/// One method's agreement with the ground truth on one draw.
#[derive(Debug, Clone, Serialize)]
pub struct AriRecord {
    pub n: usize,
    pub rep: usize,
    pub method: Method,
    pub ari: f64,
}

/// Per-repetition quantities that do not depend on the compared method.
#[derive(Debug, Clone, Serialize)]
pub struct RepInfo {
    pub n: usize,
    pub rep: usize,
    pub chosen_k: Option<usize>,
    pub p_h0: Option<f64>,
    pub p_h1: Option<f64>,
}

/// Paired ARI difference of the covariate-adjusted model against one
/// baseline, with a 90% normal confidence interval.
#[derive(Debug, Clone, Serialize)]
pub struct DiffSummary {
    pub n: usize,
    pub versus: Method,
    pub reps: usize,
    pub mean_diff: f64,
    pub ci90_lo: f64,
    pub ci90_hi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionFrequency {
    pub n: usize,
    pub k: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub scenario: u8,
    pub reps: usize,
    pub ari_records: Vec<AriRecord>,
    pub rep_info: Vec<RepInfo>,
    pub diffs: Vec<DiffSummary>,
    pub selection: Vec<SelectionFrequency>,
    pub failures: Vec<String>,
}

impl BenchmarkReport {
    pub fn ari_values(&self, n: usize, method: Method) -> Vec<f64> {
        self.ari_records
            .iter()
            .filter(|r| r.n == n && r.method == method)
            .map(|r| r.ari)
            .collect()
    }

    /// Paired differences ARI(cemco) − ARI(other) over the repetitions where
    /// both methods completed.
    pub fn paired_diffs(&self, n: usize, other: Method) -> Vec<f64> {
        let mut out = Vec::new();
        for info in self.rep_info.iter().filter(|r| r.n == n) {
            let find = |m: Method| {
                self.ari_records
                    .iter()
                    .find(|r| r.n == n && r.rep == info.rep && r.method == m)
                    .map(|r| r.ari)
            };
            if let (Some(a), Some(b)) = (find(Method::Cemco), find(other)) {
                out.push(a - b);
            }
        }
        out
    }

    pub fn p_values_h0(&self, n: usize) -> Vec<f64> {
        self.rep_info.iter().filter(|r| r.n == n).filter_map(|r| r.p_h0).collect()
    }

    pub fn p_values_h1(&self, n: usize) -> Vec<f64> {
        self.rep_info.iter().filter(|r| r.n == n).filter_map(|r| r.p_h1).collect()
    }

    pub fn chosen_ks(&self, n: usize) -> Vec<usize> {
        self.rep_info.iter().filter(|r| r.n == n).filter_map(|r| r.chosen_k).collect()
    }

    pub fn selection_frequency(&self, n: usize, k: usize) -> f64 {
        let ks = self.chosen_ks(n);
        if ks.is_empty() {
            return 0.0;
        }
        ks.iter().filter(|&&c| c == k).count() as f64 / ks.len() as f64
    }

    /// Long-format CSV: `scenario,n,rep,method,ari,chosen_k,p_h0,p_h1`.
    /// The per-repetition columns appear on the repetition's first row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,n,rep,method,ari,chosen_k,p_h0,p_h1\n");
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for info in &self.rep_info {
            let rows: Vec<&AriRecord> = self
                .ari_records
                .iter()
                .filter(|r| r.n == info.n && r.rep == info.rep)
                .collect();
            if rows.is_empty() {
                out.push_str(&format!(
                    "{},{},{},-,,{},{},{}\n",
                    self.scenario,
                    info.n,
                    info.rep,
                    info.chosen_k.map(|k| k.to_string()).unwrap_or_default(),
                    fmt_opt(info.p_h0),
                    fmt_opt(info.p_h1),
                ));
                continue;
            }
            for (idx, rec) in rows.iter().enumerate() {
                let (ck, p0, p1) = if idx == 0 {
                    (
                        info.chosen_k.map(|k| k.to_string()).unwrap_or_default(),
                        fmt_opt(info.p_h0),
                        fmt_opt(info.p_h1),
                    )
                } else {
                    (String::new(), String::new(), String::new())
                };
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    self.scenario,
                    info.n,
                    info.rep,
                    rec.method.name(),
                    rec.ari,
                    ck,
                    p0,
                    p1
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Simulation(format!("report serialization failed: {e}")))
    }
}

struct RepOutcome {
    info: RepInfo,
    aris: Vec<AriRecord>,
    failures: Vec<String>,
}

/// Runs `reps` repetitions per grid point: every method clusters the same
/// draw, the BIC sweep records its chosen K, and the scenario's covariate
/// test runs on the draw (H₁) and on a matching null regeneration (H₀).
/// Failures are recorded without aborting the sweep.
pub fn run_benchmark(
    scenario: Scenario,
    n_grid: &[usize],
    reps: usize,
    methods: &[Method],
    seed: u64,
    options: &BenchmarkOptions,
) -> Result<BenchmarkReport> {
    if reps < 2 {
        return Err(Error::Simulation("benchmark needs at least 2 repetitions".into()));
    }
    let mut jobs = Vec::new();
    for &n in n_grid {
        for rep in 0..reps {
            jobs.push((n, rep));
        }
    }
    let outcomes: Vec<RepOutcome> = jobs
        .into_par_iter()
        .map(|(n, rep)| run_rep(scenario, n, rep, methods, seed, options))
        .collect();

    let mut report = BenchmarkReport {
        scenario: scenario.index(),
        reps,
        ari_records: Vec::new(),
        rep_info: Vec::new(),
        diffs: Vec::new(),
        selection: Vec::new(),
        failures: Vec::new(),
    };
    for outcome in outcomes {
        report.ari_records.extend(outcome.aris);
        report.rep_info.push(outcome.info);
        report.failures.extend(outcome.failures);
    }

    for &n in n_grid {
        for &other in methods.iter().filter(|&&m| m != Method::Cemco) {
            let diffs = report.paired_diffs(n, other);
            if diffs.len() >= 2 {
                let (mean, lo, hi) = mean_ci90(&diffs);
                report.diffs.push(DiffSummary {
                    n,
                    versus: other,
                    reps: diffs.len(),
                    mean_diff: mean,
                    ci90_lo: lo,
                    ci90_hi: hi,
                });
            }
        }
        let ks = report.chosen_ks(n);
        if !ks.is_empty() {
            let max_k = *ks.iter().max().unwrap();
            for k in 1..=max_k {
                let count = ks.iter().filter(|&&c| c == k).count();
                if count > 0 {
                    report.selection.push(SelectionFrequency { n, k, count });
                }
            }
        }
    }
    Ok(report)
}

fn run_rep(
    scenario: Scenario,
    n: usize,
    rep: usize,
    methods: &[Method],
    seed: u64,
    options: &BenchmarkOptions,
) -> RepOutcome {
    let stream = (n as u64) << 20 | rep as u64;
    let data_seed = mix_seed(seed, stream);
    let fit_seed = mix_seed(seed, stream ^ 0xF17);
    let mut failures = Vec::new();
    let mut aris = Vec::new();
    let mut info = RepInfo { n, rep, chosen_k: None, p_h0: None, p_h1: None };

    let drawn = match scenario.generate(n, data_seed, options.beta_scale) {
        Ok(d) => d,
        Err(err) => {
            failures.push(format!("scenario {} n={n} rep={rep}: generation failed: {err}", scenario.index()));
            return RepOutcome { info, aris, failures };
        }
    };
    let k = scenario.true_k();
    let config = scenario.cemco_config(options.restarts, fit_seed);

    for &method in methods {
        let fit_result = match method {
            Method::Cemco => fit(&drawn.data, &config),
            Method::Cem => cem_fit(&drawn.data, k, options.restarts, fit_seed),
            Method::CemDimension => cem_dimension_fit(&drawn.data, k, options.restarts, fit_seed),
            Method::CemPartial => cem_partial_fit(&drawn.data, k, options.restarts, fit_seed),
        };
        match fit_result.and_then(|f| adjusted_rand_index(&f.assignment, &drawn.truth)) {
            Ok(ari) => aris.push(AriRecord { n, rep, method, ari }),
            Err(err) => {
                failures.push(format!("n={n} rep={rep} {}: {err}", method.name()));
            }
        }
    }

    if options.run_selection {
        let (k_min, k_max) = options.k_range.unwrap_or_else(|| scenario.default_k_range());
        match select_k(&drawn.data, &config, k_min, k_max) {
            Ok(table) => info.chosen_k = Some(table.chosen_k),
            Err(err) => failures.push(format!("n={n} rep={rep} select_k: {err}")),
        }
    }

    if options.test_h1 {
        match lrt(&drawn.data, &config, 0, scenario.test_target()) {
            Ok(t) => info.p_h1 = Some(t.p_value),
            Err(err) => failures.push(format!("n={n} rep={rep} H1 test: {err}")),
        }
    }
    if options.test_h0 {
        let null_seed = mix_seed(seed, stream ^ 0xB0B0);
        match scenario
            .generate_null(n, null_seed)
            .and_then(|null_draw| lrt(&null_draw.data, &config, 0, scenario.test_target()))
        {
            Ok(t) => info.p_h0 = Some(t.p_value),
            Err(err) => failures.push(format!("n={n} rep={rep} H0 test: {err}")),
        }
    }

    RepOutcome { info, aris, failures }
}

/// Mean with a 90% normal-approximation confidence interval.
fn mean_ci90(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.644_853_626_951_472_2 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}
