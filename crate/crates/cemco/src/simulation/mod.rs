//! Scenario generators mirroring the simulation designs, clustering-quality
//! metrics, and the benchmark runner producing ARI comparisons, BIC
//! selection frequencies, and test p-values under both hypotheses.

mod benchmark;
mod metrics;

pub use benchmark::{
    run_benchmark, AriRecord, BenchmarkOptions, BenchmarkReport, DiffSummary, Method, RepInfo,
    Scenario, SelectionFrequency,
};
pub use metrics::adjusted_rand_index;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::model::{clamp_scale, Assignment};

/// Distribution of one simulated covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovariateDist {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
}

/// Complete record of a generating model; regenerating from it reproduces
/// the data set bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub mu_star: DMatrix<f64>,
    /// Linear covariate effect on the centroids, one P×M block per cluster.
    pub beta: Vec<DMatrix<f64>>,
    /// Quadratic effect (applied to z²) for the nonlinear scenario.
    pub beta_quadratic: Option<Vec<DMatrix<f64>>>,
    pub sigma: DMatrix<f64>,
    /// Covariate effect on the covariance scales, one P×M block per cluster.
    pub gamma: Vec<DMatrix<f64>>,
    pub e: Vec<DMatrix<f64>>,
    pub covariate_dists: Vec<CovariateDist>,
    pub seed: u64,
}

impl GeneratorParams {
    pub fn p(&self) -> usize {
        self.covariate_dists.len()
    }
}

/// A generated data set together with its ground-truth partition and the
/// exact parameters that produced it.
#[derive(Debug, Clone)]
pub struct LabeledDataSet {
    pub data: DataSet,
    pub truth: Assignment,
    pub generator_params: GeneratorParams,
}

/// Samples a data set from a generating model. Items come in cluster blocks
/// of n/K (the label layout is part of the record); each item draws its
/// covariates first, then its value from the covariate-conditional Gaussian.
pub fn regenerate(params: &GeneratorParams) -> Result<LabeledDataSet> {
    let (n, k, m, p) = (params.n, params.k, params.m, params.p());
    if n % k != 0 {
        return Err(Error::Simulation(format!("n = {n} is not divisible by K = {k}")));
    }
    let per_cluster = n / k;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let std_normal = StandardNormal;

    let mut items = DMatrix::zeros(n, m);
    let mut covariates = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);

    for i in 0..n {
        let j = i / per_cluster;
        labels.push(j);

        let mut z = DVector::zeros(p);
        for (l, dist) in params.covariate_dists.iter().enumerate() {
            z[l] = match *dist {
                CovariateDist::Normal { mean, sd } => {
                    Normal::new(mean, sd).unwrap().sample(&mut rng)
                }
                CovariateDist::Bernoulli { p } => {
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            covariates[(i, l)] = z[l];
        }

        let mut mu = params.mu_star.row(j).transpose();
        for l in 0..p {
            for c in 0..m {
                mu[c] += params.beta[j][(l, c)] * z[l];
                if let Some(quad) = &params.beta_quadratic {
                    mu[c] += quad[j][(l, c)] * z[l] * z[l];
                }
            }
        }

        let mut scale = DVector::zeros(m);
        for r in 0..m {
            let mut a = params.sigma[(j, r)];
            for l in 0..p {
                a += params.gamma[j][(l, r)] * z[l];
            }
            scale[r] = clamp_scale(a);
        }
        let mut cov = params.e[j].clone();
        for r in 0..m {
            for c in 0..m {
                cov[(r, c)] *= scale[r] * scale[c];
            }
        }
        let lower = Cholesky::new(cov).ok_or(Error::NotPositiveDefinite)?.unpack();
        let noise = DVector::from_fn(m, |_, _| std_normal.sample(&mut rng));
        let x = mu + lower * noise;
        for c in 0..m {
            items[(i, c)] = x[c];
        }
    }

    Ok(LabeledDataSet {
        data: DataSet::new(items, covariates)?,
        truth: Assignment::new(labels, k)?,
        generator_params: params.clone(),
    })
}

/// Default centroid effects for scenario 1: the continuous covariates shift
/// all dimensions by ±0.1, the binary ones by ±0.2, with opposite signs in
/// the two clusters — visible drift that does not separate the clusters.
pub fn scenario1_default_beta() -> Vec<DMatrix<f64>> {
    let make = |sign: f64| {
        DMatrix::from_fn(5, 5, |l, _| if l < 2 { sign * 0.1 } else { sign * 0.2 })
    };
    vec![make(1.0), make(-1.0)]
}

/// Scenario 1: K=2 clusters in M=5 dimensions with P=5 covariates (two
/// standard normal, three Bernoulli) acting linearly on the centroids;
/// spherical covariance 0.03·I. `beta` overrides the default effects (one
/// 5×5 block per cluster).
pub fn gen_scenario1(n: usize, seed: u64, beta: Option<&[DMatrix<f64>]>) -> Result<LabeledDataSet> {
    if n % 2 != 0 {
        return Err(Error::Simulation(format!("scenario 1 needs an even n, got {n}")));
    }
    let beta = match beta {
        Some(b) => {
            if b.len() != 2 || b.iter().any(|m| m.shape() != (5, 5)) {
                return Err(Error::Simulation("scenario 1 beta override must be two 5×5 blocks".into()));
            }
            b.to_vec()
        }
        None => scenario1_default_beta(),
    };
    let mut mu_star = DMatrix::zeros(2, 5);
    for c in 0..5 {
        mu_star[(1, c)] = 0.2;
    }
    let params = GeneratorParams {
        n,
        k: 2,
        m: 5,
        mu_star,
        beta,
        beta_quadratic: None,
        sigma: DMatrix::from_element(2, 5, 1.0),
        gamma: vec![DMatrix::zeros(5, 5); 2],
        e: vec![DMatrix::identity(5, 5).scale(0.03); 2],
        covariate_dists: vec![
            CovariateDist::Normal { mean: 0.0, sd: 1.0 },
            CovariateDist::Normal { mean: 0.0, sd: 1.0 },
            CovariateDist::Bernoulli { p: 0.4 },
            CovariateDist::Bernoulli { p: 0.25 },
            CovariateDist::Bernoulli { p: 0.15 },
        ],
        seed,
    };
    regenerate(&params)
}

pub(crate) fn scenario2_beta() -> Vec<DMatrix<f64>> {
    vec![
        DMatrix::from_row_slice(1, 2, &[0.3, 0.3]),
        DMatrix::from_row_slice(1, 2, &[-0.3, -0.3]),
        DMatrix::from_row_slice(1, 2, &[0.3, -0.3]),
        DMatrix::from_row_slice(1, 2, &[-0.3, 0.3]),
    ]
}

fn unit_square_mu() -> DMatrix<f64> {
    DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])
}

/// Scenario 2: K=4 clusters in M=2 dimensions with one N(1,1) covariate that
/// shifts the centroids and scales the covariances with per-cluster weights
/// w = (1, 1, 1, 10); cores are 0.1·I.
pub fn gen_scenario2(n: usize, seed: u64) -> Result<LabeledDataSet> {
    if n % 4 != 0 {
        return Err(Error::Simulation(format!("scenario 2 needs n divisible by 4, got {n}")));
    }
    let w = [1.0, 1.0, 1.0, 10.0];
    let params = GeneratorParams {
        n,
        k: 4,
        m: 2,
        mu_star: unit_square_mu(),
        beta: scenario2_beta(),
        beta_quadratic: None,
        sigma: DMatrix::from_element(4, 2, 1.0),
        gamma: (0..4).map(|j| DMatrix::from_element(1, 2, w[j])).collect(),
        e: vec![DMatrix::identity(2, 2).scale(0.1); 4],
        covariate_dists: vec![CovariateDist::Normal { mean: 1.0, sd: 1.0 }],
        seed,
    };
    regenerate(&params)
}

/// Scenario 3: the scenario-2 geometry with a quadratic covariate effect on
/// the centroids, f_j(z) = β_j z + β_j z², and covariance 0.1·I. `beta`
/// overrides the per-cluster effect vectors (K×M; the default reuses the
/// scenario-2 β, applied to both the linear and quadratic terms).
pub fn gen_scenario3(n: usize, seed: u64, beta: Option<&DMatrix<f64>>) -> Result<LabeledDataSet> {
    if n % 4 != 0 {
        return Err(Error::Simulation(format!("scenario 3 needs n divisible by 4, got {n}")));
    }
    let per_cluster: Vec<DMatrix<f64>> = match beta {
        Some(b) => {
            if b.shape() != (4, 2) {
                return Err(Error::Simulation("scenario 3 beta override must be 4×2".into()));
            }
            (0..4).map(|j| DMatrix::from_fn(1, 2, |_, c| b[(j, c)])).collect()
        }
        None => scenario2_beta(),
    };
    let params = GeneratorParams {
        n,
        k: 4,
        m: 2,
        mu_star: unit_square_mu(),
        beta: per_cluster.clone(),
        beta_quadratic: Some(per_cluster),
        sigma: DMatrix::from_element(4, 2, 1.0),
        gamma: vec![DMatrix::zeros(1, 2); 4],
        e: vec![DMatrix::identity(2, 2).scale(0.1); 4],
        covariate_dists: vec![CovariateDist::Normal { mean: 1.0, sd: 1.0 }],
        seed,
    };
    regenerate(&params)
}
