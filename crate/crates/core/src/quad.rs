//! Adaptive Gauss–Kronrod (7/15) quadrature for vector-valued integrands.

use crate::error::{EmError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5, 7).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: usize,
    /// Number of equal panels the interval is split into before adapting.
    pub initial_panels: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            abs_tol: 1e-12,
            rel_tol: 1e-11,
            max_depth: 40,
            initial_panels: 32,
        }
    }
}

fn gk15<F>(f: &F, a: f64, b: f64, dim: usize) -> Result<(Vec<f64>, f64)>
where
    F: Fn(f64) -> Vec<f64>,
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut kronrod = vec![0.0; dim];
    let mut gauss = vec![0.0; dim];
    let eval = |x: f64| -> Result<Vec<f64>> {
        let v = f(x);
        if v.len() != dim || v.iter().any(|e| !e.is_finite()) {
            return Err(EmError::OracleFailure(format!("integrand not finite at {x}")));
        }
        Ok(v)
    };
    for (k, &node) in XGK.iter().enumerate() {
        let points: Vec<f64> = if node == 0.0 {
            vec![center]
        } else {
            vec![center - half * node, center + half * node]
        };
        for x in points {
            let v = eval(x)?;
            for (acc, e) in kronrod.iter_mut().zip(&v) {
                *acc += WGK[k] * e;
            }
            if k % 2 == 1 {
                for (acc, e) in gauss.iter_mut().zip(&v) {
                    *acc += WG[k / 2] * e;
                }
            }
        }
    }
    let err = kronrod
        .iter()
        .zip(&gauss)
        .fold(0.0_f64, |m, (k, g)| m.max((half * (k - g)).abs()));
    Ok((kronrod.into_iter().map(|v| v * half).collect(), err))
}

fn adapt<F>(f: &F, a: f64, b: f64, dim: usize, tol: f64, depth: usize, opts: &QuadOptions) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Vec<f64>,
{
    let (value, err) = gk15(f, a, b, dim)?;
    if err <= tol {
        return Ok(value);
    }
    if depth >= opts.max_depth {
        return Err(EmError::OracleFailure(format!(
            "no convergence on [{a}, {b}] (error estimate {err:e}, tolerance {tol:e})"
        )));
    }
    let mid = 0.5 * (a + b);
    let mut left = adapt(f, a, mid, dim, 0.5 * tol, depth + 1, opts)?;
    let right = adapt(f, mid, b, dim, 0.5 * tol, depth + 1, opts)?;
    for (l, r) in left.iter_mut().zip(right) {
        *l += r;
    }
    Ok(left)
}

/// Integrate `f: ℝ → ℝ^dim` over `[a, b]`.
pub fn integrate<F>(f: F, a: f64, b: f64, dim: usize, opts: &QuadOptions) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Vec<f64>,
{
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(EmError::OracleFailure(format!("bad interval [{a}, {b}]")));
    }
    let panels = opts.initial_panels.max(1);
    let width = (b - a) / panels as f64;

    // rough magnitude for the relative tolerance
    let mut scale = 0.0_f64;
    let mut coarse = Vec::with_capacity(panels);
    for p in 0..panels {
        let lo = a + width * p as f64;
        let hi = if p + 1 == panels { b } else { lo + width };
        let (v, _) = gk15(&f, lo, hi, dim)?;
        coarse.push((lo, hi));
        scale += v.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    }
    let tol = opts.abs_tol.max(opts.rel_tol * scale) / panels as f64;

    let mut total = vec![0.0; dim];
    for (lo, hi) in coarse {
        let v = adapt(&f, lo, hi, dim, tol, 0, opts)?;
        for (t, e) in total.iter_mut().zip(v) {
            *t += e;
        }
    }
    Ok(total)
}
