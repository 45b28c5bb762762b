//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `m y = b` by LU with partial pivoting.
pub fn solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::InvalidArgument("singular linear system".into()))
}

/// Solves `m Y = B` for a matrix right-hand side.
pub fn solve_mat(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::InvalidArgument("singular linear system".into()))
}

/// Minimum-norm least-squares solution of `m y = b` (SVD based).
pub fn lstsq(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = m.clone().svd(true, true);
    let eps = 1e-13 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.solve(b, eps).ok()
}

/// Principal submatrix / block `m[rows, cols]`.
pub fn block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn subvec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Neumann-series evaluation of `(I - m)^{-1} b`, truncated once the term
/// norm drops below `tol`. Only used to cross-check direct solves.
pub fn neumann_apply(m: &DMatrix<f64>, b: &DVector<f64>, tol: f64, max_terms: usize) -> DVector<f64> {
    let mut term = b.clone();
    let mut acc = b.clone();
    for _ in 0..max_terms {
        term = m * term;
        acc += &term;
        if max_abs(&term) < tol {
            break;
        }
    }
    acc
}

/// Numerically stable `log Σ exp(v_i)`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive() {
        let v = [0.1, -2.0, 3.5];
        let naive: f64 = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(v) - naive).abs() < 1e-14);
        assert_eq!(logsumexp(std::iter::empty()), f64::NEG_INFINITY);
        assert!((logsumexp([1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn neumann_agrees_with_solve() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 0.4, 0.3, 0.2]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let direct = solve(&(DMatrix::identity(2, 2) - &m), &b).unwrap();
        let series = neumann_apply(&m, &b, 1e-15, 10_000);
        assert!(max_abs(&(direct - series)) < 1e-12);
    }
}
