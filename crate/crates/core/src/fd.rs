//! Central finite differences over parameter vectors.

use nalgebra::DMatrix;

use crate::error::{EmError, Result};

/// Per-coordinate steps `base · max(1, |x_i|)`.
pub fn scaled_steps(x: &[f64], base: f64) -> Result<Vec<f64>> {
    if !(base > 0.0 && base.is_finite()) {
        return Err(EmError::InvalidStep(base));
    }
    Ok(x.iter().map(|v| base * v.abs().max(1.0)).collect())
}

fn shifted(x: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut y = x.to_vec();
    for &(i, dv) in moves {
        y[i] += dv;
    }
    y
}

pub fn gradient<F>(f: F, x: &[f64], steps: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    (0..x.len())
        .map(|i| {
            let h = steps[i];
            Ok((f(&shifted(x, &[(i, h)]))? - f(&shifted(x, &[(i, -h)]))?) / (2.0 * h))
        })
        .collect()
}

/// Symmetric Hessian from second central differences.
pub fn hessian<F>(f: F, x: &[f64], steps: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let d = x.len();
    let f0 = f(x)?;
    let mut h = DMatrix::zeros(d, d);
    for i in 0..d {
        let hi = steps[i];
        h[(i, i)] = (f(&shifted(x, &[(i, hi)]))? - 2.0 * f0 + f(&shifted(x, &[(i, -hi)]))?) / (hi * hi);
        for j in (i + 1)..d {
            let hj = steps[j];
            let v = (f(&shifted(x, &[(i, hi), (j, hj)]))? - f(&shifted(x, &[(i, hi), (j, -hj)]))?
                - f(&shifted(x, &[(i, -hi), (j, hj)]))?
                + f(&shifted(x, &[(i, -hi), (j, -hj)]))?)
                / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// Jacobian with entry `(r, i) = ∂f_r / ∂x_i`.
pub fn jacobian<F>(f: F, x: &[f64], steps: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d = x.len();
    let mut columns = Vec::with_capacity(d);
    for i in 0..d {
        let h = steps[i];
        let plus = f(&shifted(x, &[(i, h)]))?;
        let minus = f(&shifted(x, &[(i, -h)]))?;
        columns.push(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect::<Vec<_>>());
    }
    let rows = columns.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows, d, |r, i| columns[i][r]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_hessian_is_exact() {
        let f = |x: &[f64]| Ok(1.5 * x[0] * x[0] + x[0] * x[1] - 2.0 * x[1] * x[1] + 3.0 * x[1]);
        let h = hessian(f, &[0.3, -0.7], &[1e-3, 1e-3]).unwrap();
        assert!((h[(0, 0)] - 3.0).abs() < 1e-6);
        assert!((h[(0, 1)] - 1.0).abs() < 1e-6);
        assert!((h[(1, 1)] + 4.0).abs() < 1e-6);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let f = |x: &[f64]| Ok(vec![2.0 * x[0] - x[1], 4.0 * x[1]]);
        let j = jacobian(f, &[1.0, 2.0], &[1e-4, 1e-4]).unwrap();
        assert!((j[(0, 0)] - 2.0).abs() < 1e-9);
        assert!((j[(0, 1)] + 1.0).abs() < 1e-9);
        assert!((j[(1, 0)]).abs() < 1e-9);
        assert!((j[(1, 1)] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn non_positive_step_rejected() {
        assert_eq!(scaled_steps(&[1.0], 0.0), Err(EmError::InvalidStep(0.0)));
        assert_eq!(scaled_steps(&[10.0, 0.1], 1e-4).unwrap(), vec![1e-3, 1e-4]);
    }
}
