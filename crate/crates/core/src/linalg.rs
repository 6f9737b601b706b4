//! Small dense least-squares helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff below which a design matrix is rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Solves `min |X b - y|` for a row-major design matrix with `cols` columns.
pub(crate) fn least_squares(design: &[f64], cols: usize, y: &[f64]) -> Result<Vec<f64>> {
    let rows = y.len();
    if rows < cols || design.len() != rows * cols {
        return Err(Error::fit(
            format!("least squares needs at least {cols} rows, got {rows}"),
            f64::NAN,
        ));
    }
    let x = DMatrix::from_row_slice(rows, cols, design);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < RANK_TOL {
        return Err(Error::fit(
            format!("rank-deficient design ({rows}x{cols}, condition {:e})", smax / smin),
            f64::NAN,
        ));
    }
    let b = svd
        .solve(&DVector::from_column_slice(y), 0.0)
        .map_err(|e| Error::fit(e.to_string(), f64::NAN))?;
    Ok(b.iter().copied().collect())
}

/// Weights `w` such that the least-squares fit evaluated at `at` equals `w . y`.
///
/// Uses the pseudo-inverse so collinear bases still yield a (minimum-norm) answer.
pub(crate) fn projection_weights(design: &[f64], cols: usize, at: &[f64]) -> Vec<f64> {
    let rows = design.len() / cols;
    let x = DMatrix::from_row_slice(rows, cols, design);
    let pinv = x
        .pseudo_inverse(1e-10)
        .expect("pseudo-inverse with a non-negative epsilon");
    let row = DMatrix::from_row_slice(1, cols, at);
    (row * pinv).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let t: Vec<f64> = (0..5).map(f64::from).collect();
        let design: Vec<f64> = t.iter().flat_map(|&x| [1.0, x]).collect();
        let y: Vec<f64> = t.iter().map(|x| 3.0 + 2.0 * x).collect();
        let b = least_squares(&design, 2, &y).unwrap();
        assert!((b[0] - 3.0).abs() < 1e-12 && (b[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_is_an_error() {
        let design = vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        assert!(least_squares(&design, 2, &[1.0, 2.0, 3.0]).is_err());
        assert!(least_squares(&[1.0, 1.0], 2, &[1.0]).is_err());
    }

    #[test]
    fn projection_weights_extrapolate_a_line() {
        let design: Vec<f64> = (0..4).flat_map(|t| [1.0, t as f64]).collect();
        let w = projection_weights(&design, 2, &[1.0, 4.0]);
        let y = [1.0, 2.0, 3.0, 4.0];
        let pred: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
        assert!((pred - 5.0).abs() < 1e-9);
    }
}
