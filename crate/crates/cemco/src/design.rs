//! Internal covariate designs: the N×Q matrix multiplying the centroid
//! effects (raw covariate columns, or their spline bases with the intercept
//! column dropped) and the N×P_cov matrix driving the covariance scales.

use nalgebra::DMatrix;

use crate::data::DataSet;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::splines::bspline_basis;

#[derive(Debug, Clone)]
pub(crate) struct CentroidDesign {
    /// N×Q design; Q = 0 when no centroid covariates are configured.
    pub matrix: DMatrix<f64>,
    /// Per selected covariate, its (first column, width) block in the design.
    pub spans: Vec<(usize, usize)>,
}

impl CentroidDesign {
    pub fn q(&self) -> usize {
        self.matrix.ncols()
    }
}

pub(crate) fn build_centroid_design(data: &DataSet, config: &ModelConfig) -> Result<CentroidDesign> {
    let n = data.n_items();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut spans = Vec::with_capacity(config.centroid_covariates.len());
    for &l in &config.centroid_covariates {
        let raw: Vec<f64> = data.covariates().column(l).iter().copied().collect();
        match &config.spline {
            None => {
                spans.push((columns.len(), 1));
                columns.push(raw);
            }
            Some(spec) => {
                let basis = bspline_basis(&raw, spec)?;
                spans.push((columns.len(), spec.df()));
                for q in 1..basis.n_functions() {
                    columns.push(basis.matrix().column(q).iter().copied().collect());
                }
            }
        }
    }
    let mut matrix = DMatrix::zeros(n, columns.len());
    for (c, col) in columns.iter().enumerate() {
        matrix.column_mut(c).copy_from_slice(col);
    }
    Ok(CentroidDesign { matrix, spans })
}

pub(crate) fn build_covariance_design(data: &DataSet, config: &ModelConfig) -> DMatrix<f64> {
    let n = data.n_items();
    let mut matrix = DMatrix::zeros(n, config.covariance_covariates.len());
    for (c, &l) in config.covariance_covariates.iter().enumerate() {
        matrix.column_mut(c).copy_from(&data.covariates().column(l));
    }
    matrix
}
