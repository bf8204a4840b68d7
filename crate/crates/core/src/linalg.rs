//! Small dense helpers on top of `nalgebra`: deterministic reductions,
//! symmetrization, spectral norm and eigenvalue listings.

use nalgebra::DMatrix;

use crate::error::{EmError, Result};

/// Fixed-order pairwise summation of equally shaped matrices.
///
/// The split points depend only on the slice length, so the result is
/// bit-reproducible regardless of how the inputs were produced.
pub fn pairwise_sum(items: &[DMatrix<f64>]) -> Option<DMatrix<f64>> {
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        2 => Some(&items[0] + &items[1]),
        len => {
            let mid = len / 2;
            let left = pairwise_sum(&items[..mid])?;
            let right = pairwise_sum(&items[mid..])?;
            Some(left + right)
        }
    }
}

/// `(m + mᵀ) / 2`, with the upper triangle mirrored so the result is exactly symmetric.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        out[(i, i)] = m[(i, i)];
        for j in (i + 1)..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

pub fn is_exactly_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| m[(i, j)].to_bits() == m[(j, i)].to_bits()))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn spectral_rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(EmError::DimensionMismatch {
            expected: b.nrows(),
            got: a.nrows(),
        });
    }
    let denom = spectral_norm(b);
    if denom == 0.0 || !denom.is_finite() {
        return Err(EmError::UndefinedMetric);
    }
    Ok(spectral_norm(&(a - b)) / denom)
}

/// Eigenvalues in descending order. Symmetric inputs use the symmetric solver;
/// anything else reports the real parts of its (possibly complex) spectrum.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = if is_exactly_symmetric(m) {
        m.clone().symmetric_eigenvalues().iter().copied().collect()
    } else {
        m.complex_eigenvalues().iter().map(|z| z.re).collect()
    };
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

pub fn inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or(EmError::SingularMatrix(what))
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(EmError::DimensionMismatch {
            expected: ncols,
            got: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
