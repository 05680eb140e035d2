//! Clustering input: items plus their per-item covariates.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// N items of dimension M together with P covariate values per item.
///
/// Categorical covariates must be encoded numerically by the caller
/// (binary ones as 0/1).
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    items: DMatrix<f64>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    item_ids: Option<Vec<String>>,
}

impl DataSet {
    /// Builds a data set from an N×M item matrix and an N×P covariate matrix.
    ///
    /// Fails on empty items, non-finite entries, or a covariate matrix whose
    /// row count does not match the items.
    pub fn new(items: DMatrix<f64>, covariates: DMatrix<f64>) -> Result<Self> {
        let names = (0..covariates.ncols()).map(|l| format!("z{}", l + 1)).collect();
        Self::with_names(items, covariates, names, None)
    }

    /// As [`DataSet::new`] with explicit covariate names and optional item ids.
    pub fn with_names(
        items: DMatrix<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        item_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if items.nrows() == 0 || items.ncols() == 0 {
            return Err(Error::InvalidInput("items matrix must be at least 1×1".into()));
        }
        if covariates.ncols() > 0 && covariates.nrows() != items.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "covariates have {} rows but items have {}",
                covariates.nrows(),
                items.nrows()
            )));
        }
        if items.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("items contain non-finite entries".into()));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariates contain non-finite entries".into()));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate names for {} covariate columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        if let Some(ids) = &item_ids {
            if ids.len() != items.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "{} item ids for {} items",
                    ids.len(),
                    items.nrows()
                )));
            }
        }
        Ok(Self { items, covariates, covariate_names, item_ids })
    }

    /// Number of items N.
    pub fn n_items(&self) -> usize {
        self.items.nrows()
    }

    /// Item dimension M.
    pub fn n_dims(&self) -> usize {
        self.items.ncols()
    }

    /// Number of covariates P.
    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// The N×M item matrix.
    pub fn items(&self) -> &DMatrix<f64> {
        &self.items
    }

    /// The N×P covariate matrix (zero columns when P = 0).
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn item_ids(&self) -> Option<&[String]> {
        self.item_ids.as_deref()
    }

    /// Index of a covariate by name.
    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Returns a copy with the item rows reordered by `perm` (a permutation
    /// of 0..N). Covariates and ids follow the same reordering.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_items();
        if perm.len() != n {
            return Err(Error::DimensionMismatch("permutation length != N".into()));
        }
        let items = DMatrix::from_fn(n, self.n_dims(), |i, j| self.items[(perm[i], j)]);
        let covariates =
            DMatrix::from_fn(n, self.n_covariates(), |i, j| self.covariates[(perm[i], j)]);
        let ids = self
            .item_ids
            .as_ref()
            .map(|ids| perm.iter().map(|&i| ids[i].clone()).collect());
        Self::with_names(items, covariates, self.covariate_names.clone(), ids)
    }
}
