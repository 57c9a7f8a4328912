//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Greedy column selection on a Gram matrix, in the given column order.
///
/// A column is kept when its squared residual after projection onto the
/// already-kept columns exceeds `rel_tol` times its own squared norm.
/// Returns `(kept, dropped)` column indices.
pub fn independent_columns(gram: &DMatrix<f64>, rel_tol: f64) -> (Vec<usize>, Vec<usize>) {
    let p = gram.nrows();
    let mut kept: Vec<usize> = Vec::with_capacity(p);
    let mut dropped = Vec::new();
    // Rows of the incremental Cholesky factor of gram[kept, kept].
    let mut chol: Vec<Vec<f64>> = Vec::with_capacity(p);
    for c in 0..p {
        let diag = gram[(c, c)];
        if !(diag > 0.0) || !diag.is_finite() {
            dropped.push(c);
            continue;
        }
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (i, &k) in kept.iter().enumerate() {
            let mut s = gram[(k, c)];
            for t in 0..i {
                s -= chol[i][t] * row[t];
            }
            row.push(s / chol[i][i]);
        }
        let resid = diag - row.iter().map(|v| v * v).sum::<f64>();
        if resid > rel_tol * diag {
            row.push(resid.sqrt());
            chol.push(row);
            kept.push(c);
        } else {
            dropped.push(c);
        }
    }
    (kept, dropped)
}

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky factorisation with a descriptive error on failure.
pub fn cholesky(m: &DMatrix<f64>, context: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: context.to_string(),
            eigenvalue: min_eigenvalue(m),
        })
}

pub fn log_det_from_cholesky(ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = ch.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}
