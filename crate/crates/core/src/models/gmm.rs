//! Two-component unit-variance Gaussian mixture
//! `p(y) = (1 − π) φ(y − μ1) + π φ(y − μ2)` with `θ = (π, μ1, μ2)`.
//!
//! The missing datum `X_i ∈ {0, 1}` labels the component of `Y_i`; its
//! conditional mean is the responsibility `α_i`. Densities and
//! responsibilities are evaluated in log space.

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::baselines::CompleteInfoParts;
use crate::em::{Capabilities, Dataset, EmModel, ParamVector};
use crate::error::{EmError, Result};
use crate::quad::{integrate, QuadOptions};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn ln_phi(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `w · ln p`, taken as zero when the weight vanishes.
fn weighted_ln(w: f64, p: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * p.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmParams {
    pub pi: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl GmmParams {
    pub fn new(pi: f64, mu1: f64, mu2: f64) -> Result<Self> {
        let p = GmmParams { pi, mu1, mu2 };
        p.validate()?;
        Ok(p)
    }

    pub fn from_param(theta: &ParamVector) -> Result<Self> {
        theta.expect_dim(3)?;
        Self::new(theta[0], theta[1], theta[2])
    }

    pub fn to_param(self) -> ParamVector {
        ParamVector::from_slice(&[self.pi, self.mu1, self.mu2]).expect("validated params are finite")
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(EmError::InvalidParameter {
                coord: 0,
                value: self.pi,
                reason: "mixing weight must lie in [0, 1]",
            });
        }
        for (coord, value) in [(1, self.mu1), (2, self.mu2)] {
            if !value.is_finite() {
                return Err(EmError::InvalidParameter {
                    coord,
                    value,
                    reason: "mean must be finite",
                });
            }
        }
        Ok(())
    }

    fn interior(&self) -> Result<()> {
        if self.pi <= 0.0 || self.pi >= 1.0 {
            return Err(EmError::BoundaryParameter {
                coord: 0,
                value: self.pi,
            });
        }
        Ok(())
    }

    /// Log weights of the two components at `y`.
    fn ln_terms(&self, y: f64) -> (f64, f64) {
        (
            (1.0 - self.pi).ln() + ln_phi(y - self.mu1),
            self.pi.ln() + ln_phi(y - self.mu2),
        )
    }
}

pub fn gmm_ln_density(y: f64, params: &GmmParams) -> f64 {
    let (a, b) = params.ln_terms(y);
    log_add_exp(a, b)
}

pub fn gmm_density(y: f64, params: &GmmParams) -> f64 {
    gmm_ln_density(y, params).exp()
}

/// Responsibility `α = π φ(y − μ2) / [(1 − π) φ(y − μ1) + π φ(y − μ2)]`.
pub fn gmm_alpha(y: f64, params: &GmmParams) -> Result<f64> {
    if params.pi == 0.0 {
        return Ok(0.0);
    }
    if params.pi == 1.0 {
        return Ok(1.0);
    }
    let (a, b) = params.ln_terms(y);
    let total = log_add_exp(a, b);
    if !total.is_finite() {
        return Err(EmError::ResponsibilityUnderflow(0));
    }
    Ok((b - total).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmData {
    y: Vec<f64>,
}

impl GmmData {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(EmError::InvalidData("mixture data needs at least one observation".into()));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(EmError::InvalidData(format!("observation {i} is not finite")));
        }
        Ok(GmmData { y })
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    /// One observation per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut y = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|_| EmError::InvalidData(format!("line {}: `{line}` is not a number", lineno + 1)))?;
            y.push(v);
        }
        Self::new(y)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.y.len() * 20);
        for v in &self.y {
            out.push_str(&format!("{v}\n"));
        }
        out
    }
}

impl Dataset for GmmData {
    fn size(&self) -> usize {
        self.y.len()
    }
}

/// The mixture model with every optional capability.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianMixture;

impl GaussianMixture {
    fn alphas(&self, params: &GmmParams, data: &GmmData) -> Result<Vec<f64>> {
        data.y
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                gmm_alpha(y, params).map_err(|e| match e {
                    EmError::ResponsibilityUnderflow(_) => EmError::ResponsibilityUnderflow(i),
                    other => other,
                })
            })
            .collect()
    }

    /// Per-observation observed-data score at `params` (interior `π` only).
    fn observed_score(params: &GmmParams, y: f64) -> Result<[f64; 3]> {
        let a = gmm_alpha(y, params)?;
        Ok([
            a / params.pi - (1.0 - a) / (1.0 - params.pi),
            (1.0 - a) * (y - params.mu1),
            a * (y - params.mu2),
        ])
    }
}

impl EmModel for GaussianMixture {
    type Data = GmmData;

    fn dim(&self) -> usize {
        3
    }

    fn param_names(&self) -> Vec<String> {
        vec!["pi".into(), "mu1".into(), "mu2".into()]
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_s: true,
            has_observed_loglik: true,
            has_complete_info: true,
        }
    }

    fn validate(&self, theta: &ParamVector) -> Result<()> {
        GmmParams::from_param(theta).map(|_| ())
    }

    fn q_value(&self, theta: &ParamVector, theta_cond: &ParamVector, data: &GmmData) -> Result<f64> {
        let p = GmmParams::from_param(theta)?;
        let cond = GmmParams::from_param(theta_cond)?;
        let alphas = self.alphas(&cond, data)?;
        let mut q = 0.0;
        for (&y, &a) in data.y.iter().zip(&alphas) {
            let b = 1.0 - a;
            q += weighted_ln(b, 1.0 - p.pi) + weighted_ln(a, p.pi);
            if b != 0.0 {
                q += b * ln_phi(y - p.mu1);
            }
            if a != 0.0 {
                q += a * ln_phi(y - p.mu2);
            }
        }
        if q.is_nan() {
            return Err(EmError::InvalidParameter {
                coord: 0,
                value: p.pi,
                reason: "Q is undefined at this weight",
            });
        }
        Ok(q)
    }

    fn s_value(&self, theta_cond: &ParamVector, data: &GmmData) -> Result<ParamVector> {
        let p = GmmParams::from_param(theta_cond)?;
        p.interior()?;
        let mut s = [0.0; 3];
        for (&y, a) in data.y.iter().zip(self.alphas(&p, data)?) {
            s[0] += a / p.pi - (1.0 - a) / (1.0 - p.pi);
            s[1] += (1.0 - a) * (y - p.mu1);
            s[2] += a * (y - p.mu2);
        }
        ParamVector::from_slice(&s)
    }

    fn em_map(&self, theta: &ParamVector, data: &GmmData) -> Result<ParamVector> {
        let p = GmmParams::from_param(theta)?;
        let alphas = self.alphas(&p, data)?;
        let (mut sa, mut sb, mut say, mut sby) = (0.0, 0.0, 0.0, 0.0);
        for (&y, &a) in data.y.iter().zip(&alphas) {
            sa += a;
            sb += 1.0 - a;
            say += a * y;
            sby += (1.0 - a) * y;
        }
        if sa <= 0.0 {
            return Err(EmError::DegeneratePosterior("all responsibilities for component 2 vanish".into()));
        }
        if sb <= 0.0 {
            return Err(EmError::DegeneratePosterior("all responsibilities for component 1 vanish".into()));
        }
        ParamVector::from_slice(&[sa / data.y.len() as f64, sby / sb, say / sa])
    }

    fn sample_data(&self, theta: &ParamVector, n: usize, rng: &mut dyn RngCore) -> Result<GmmData> {
        let p = GmmParams::from_param(theta)?;
        if n == 0 {
            return Err(EmError::InvalidData("sample size must be >= 1".into()));
        }
        let y = (0..n)
            .map(|_| {
                let second = rng.random::<f64>() < p.pi;
                let z: f64 = rng.sample(StandardNormal);
                if second {
                    p.mu2 + z
                } else {
                    p.mu1 + z
                }
            })
            .collect();
        GmmData::new(y)
    }

    fn observed_loglik(&self, theta: &ParamVector, data: &GmmData) -> Result<f64> {
        let p = GmmParams::from_param(theta)?;
        Ok(data.y.iter().map(|&y| gmm_ln_density(y, &p)).sum())
    }

    fn complete_info(&self, theta: &ParamVector, data: &GmmData) -> Result<CompleteInfoParts> {
        let p = GmmParams::from_param(theta)?;
        p.interior()?;
        let mut neg_hessian = DMatrix::zeros(3, 3);
        let mut cov_sum = DMatrix::zeros(3, 3);
        let mut score = nalgebra::DVector::zeros(3);
        for (&y, a) in data.y.iter().zip(self.alphas(&p, data)?) {
            let b = 1.0 - a;
            neg_hessian[(0, 0)] += a / (p.pi * p.pi) + b / ((1.0 - p.pi) * (1.0 - p.pi));
            neg_hessian[(1, 1)] += b;
            neg_hessian[(2, 2)] += a;

            // complete-data score for X = 1 and X = 0
            let s1 = nalgebra::Vector3::new(1.0 / p.pi, 0.0, y - p.mu2);
            let s0 = nalgebra::Vector3::new(-1.0 / (1.0 - p.pi), y - p.mu1, 0.0);
            let mean = s1 * a + s0 * b;
            let second = s1 * s1.transpose() * a + s0 * s0.transpose() * b;
            let cov = second - mean * mean.transpose();
            for i in 0..3 {
                score[i] += mean[i];
                for j in 0..3 {
                    cov_sum[(i, j)] += cov[(i, j)];
                }
            }
        }
        // observations are independent given θ, so cross terms factor
        let outer = &cov_sum + &score * score.transpose();
        Ok(CompleteInfoParts {
            cond_exp_neg_hessian: neg_hessian,
            cond_exp_score_outer: crate::linalg::symmetrize(&outer),
            cond_score: ParamVector::from_dvector(&score)?,
        })
    }
}

/// Expected information `n ∫ s(y) s(y)ᵀ p(y) dy` by adaptive quadrature over
/// `[min(μ) − 10, max(μ) + 10]`, where `s` is the single-observation score.
pub fn gmm_expected_fim_oracle(params: &GmmParams, n: usize, opts: &QuadOptions) -> Result<DMatrix<f64>> {
    params.interior()?;
    let lo = params.mu1.min(params.mu2) - 10.0;
    let hi = params.mu1.max(params.mu2) + 10.0;
    let upper = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    let values = integrate(
        |y| {
            let Ok(s) = GaussianMixture::observed_score(params, y) else {
                return vec![f64::NAN; 6];
            };
            let w = gmm_density(y, params);
            upper.iter().map(|&(i, j)| s[i] * s[j] * w).collect()
        },
        lo,
        hi,
        6,
        opts,
    )?;
    let mut m = DMatrix::zeros(3, 3);
    for (&(i, j), v) in upper.iter().zip(values) {
        m[(i, j)] = n as f64 * v;
        m[(j, i)] = n as f64 * v;
    }
    Ok(m)
}
