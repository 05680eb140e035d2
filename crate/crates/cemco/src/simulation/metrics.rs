//! Chance-corrected agreement between two partitions.

use crate::error::{Error, Result};
use crate::model::Assignment;

/// Adjusted Rand index from the pair-counting contingency formula: 1 for
/// identical partitions (up to relabeling), expectation ≈ 0 for independent
/// random labelings.
pub fn adjusted_rand_index(a: &Assignment, b: &Assignment) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Simulation(format!(
            "partitions have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let ka = a.labels().iter().max().map_or(0, |&m| m + 1);
    let kb = b.labels().iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    let mut rows = vec![0usize; ka];
    let mut cols = vec![0usize; kb];
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        table[la][lb] += 1;
        rows[la] += 1;
        cols[lb] += 1;
    }

    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_cells: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() == 0.0 {
        // Both partitions are degenerate in the same way.
        return Ok(1.0);
    }
    Ok((sum_cells - expected) / (max_index - expected))
}
