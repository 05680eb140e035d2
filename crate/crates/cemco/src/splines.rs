//! B-spline design matrices for nonlinear covariate effects on the cluster
//! centroids. Expanding a covariate into its basis reduces the nonlinear
//! model to the linear machinery.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{Error, Result};

/// Shape of a B-spline basis: S interior knots (placed at quantiles of the
/// observed values) and polynomial degree B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineSpec {
    /// Interior knot count S ≥ 0.
    pub knots: usize,
    /// Polynomial degree B ≥ 1.
    pub degree: usize,
}

impl SplineSpec {
    pub fn new(knots: usize, degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Spline("spline degree must be at least 1".into()));
        }
        Ok(Self { knots, degree })
    }

    /// Per-covariate design width S + B once the intercept column is dropped.
    pub fn df(&self) -> usize {
        self.knots + self.degree
    }
}

/// Evaluated B-spline basis for one covariate.
///
/// `matrix` holds the full basis (S + B + 1 functions), which is a partition
/// of unity: every row sums to 1 and all entries lie in [0, 1]. The design
/// used for fitting drops the first column (see [`expand`]), so the free
/// column count matches the S + B dimensioning of the centroid model; the
/// dropped function is absorbed by the covariate-free centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    matrix: DMatrix<f64>,
    knot_vector: Vec<f64>,
    degree: usize,
}

impl SplineBasis {
    /// The N×(S+B+1) basis matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// The clamped knot vector (boundary knots repeated degree+1 times).
    pub fn knot_vector(&self) -> &[f64] {
        &self.knot_vector
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_functions(&self) -> usize {
        self.matrix.ncols()
    }

    /// Evaluates the stored knot vector at new points. Values outside the
    /// training range are clamped to the boundary knots. Evaluating the
    /// training values reproduces the stored matrix bit-for-bit.
    pub fn evaluate(&self, values: &[f64]) -> DMatrix<f64> {
        evaluate_basis(&self.knot_vector, self.degree, self.n_functions(), values)
    }
}

/// Builds the B-spline basis of `spec` over `values`, with interior knots at
/// equally spaced quantiles and boundary knots at the min/max.
pub fn bspline_basis(values: &[f64], spec: &SplineSpec) -> Result<SplineBasis> {
    let n = values.len();
    let df = spec.df();
    if n <= df {
        return Err(Error::Spline(format!(
            "need more than S+B = {df} values to build the basis, got {n}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Spline("values contain non-finite entries".into()));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    if lo == hi {
        return Err(Error::Spline("too few distinct values to place knots".into()));
    }

    let mut interior = Vec::with_capacity(spec.knots);
    for s in 1..=spec.knots {
        interior.push(quantile(&sorted, s as f64 / (spec.knots + 1) as f64));
    }
    // Quantile knots must be strictly increasing and strictly inside the
    // boundary, otherwise the data cannot support the requested knot count.
    for (idx, &q) in interior.iter().enumerate() {
        let prev = if idx == 0 { lo } else { interior[idx - 1] };
        if q <= prev || q >= hi {
            return Err(Error::Spline("too few distinct values to place knots".into()));
        }
    }

    let b = spec.degree;
    let mut knot_vector = Vec::with_capacity(spec.knots + 2 * (b + 1));
    knot_vector.extend(std::iter::repeat(lo).take(b + 1));
    knot_vector.extend(interior);
    knot_vector.extend(std::iter::repeat(hi).take(b + 1));

    let n_funcs = spec.knots + b + 1;
    let matrix = evaluate_basis(&knot_vector, b, n_funcs, values);
    Ok(SplineBasis { matrix, knot_vector, degree: b })
}

/// Replaces each covariate column by its B-spline design (intercept column
/// dropped), concatenated in covariate order. Covariate indices listed in
/// `passthrough` (e.g. binary covariates) keep their raw column.
pub fn expand(data: &DataSet, spec: &SplineSpec, passthrough: &[usize]) -> Result<DataSet> {
    let p = data.n_covariates();
    if p == 0 {
        return Err(Error::Spline("expand requires at least one covariate".into()));
    }
    let n = data.n_items();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for l in 0..p {
        let raw: Vec<f64> = data.covariates().column(l).iter().copied().collect();
        let name = &data.covariate_names()[l];
        if passthrough.contains(&l) {
            columns.push(raw);
            names.push(name.clone());
            continue;
        }
        let basis = bspline_basis(&raw, spec)?;
        for q in 1..basis.n_functions() {
            columns.push(basis.matrix().column(q).iter().copied().collect());
            names.push(format!("{name}_s{q}"));
        }
    }
    let mut covariates = DMatrix::zeros(n, columns.len());
    for (c, col) in columns.iter().enumerate() {
        covariates.column_mut(c).copy_from_slice(col);
    }
    DataSet::with_names(
        data.items().clone(),
        covariates,
        names,
        data.item_ids().map(|ids| ids.to_vec()),
    )
}

/// Type-7 quantile (linear interpolation) of pre-sorted values.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Evaluates all basis functions at each value via the standard knot-span
/// triangular recursion. Out-of-range values are clamped to the boundary.
fn evaluate_basis(knots: &[f64], degree: usize, n_funcs: usize, values: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(values.len(), n_funcs);
    let lo = knots[0];
    let hi = knots[knots.len() - 1];
    let mut work = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for (row, &v) in values.iter().enumerate() {
        let u = v.clamp(lo, hi);
        let span = find_span(knots, degree, n_funcs, u);
        basis_at_span(knots, degree, span, u, &mut work, &mut left, &mut right);
        for (offset, &val) in work.iter().enumerate() {
            out[(row, span - degree + offset)] = val;
        }
    }
    out
}

/// Index of the knot span containing `u`; the final span is closed at the
/// right boundary so the last basis function reaches 1 at the maximum.
fn find_span(knots: &[f64], degree: usize, n_funcs: usize, u: f64) -> usize {
    let last = n_funcs - 1;
    if u >= knots[last + 1] {
        return last;
    }
    let mut lo = degree;
    let mut hi = last;
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if knots[mid] <= u {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Values of the degree+1 basis functions that are nonzero on `span`
/// (The NURBS Book, algorithm A2.2).
fn basis_at_span(
    knots: &[f64],
    degree: usize,
    span: usize,
    u: f64,
    n: &mut [f64],
    left: &mut [f64],
    right: &mut [f64],
) {
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
}
