//! Quadratic test problem with a closed-form everything.
//!
//! Observations `y_i ~ N(θ, n H⁻¹)` give `L_O(θ) = −½ (θ − ȳ)ᵀ H (θ − ȳ)` up to a
//! constant. A latent `X ~ N(θ, K⁻¹)` known to equal `θ′` in conditional mean
//! adds `−½ (θ − θ′)ᵀ K (θ − θ′)` to `Q`, so
//!
//! * `S(θ′) = −H (θ′ − ȳ)`, exactly linear with Hessian `−H`;
//! * `M(θ′) = (H + K)⁻¹ (H ȳ + K θ′)`;
//! * the expected and observed information both equal `H`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::baselines::CompleteInfoParts;
use crate::em::{Capabilities, Dataset, EmModel, ParamVector};
use crate::error::{EmError, Result};

#[derive(Debug, Clone)]
pub struct SyntheticQuadratic {
    h: DMatrix<f64>,
    k: DMatrix<f64>,
    h_plus_k_inv: DMatrix<f64>,
    sample_factor: DMatrix<f64>,
    has_s: bool,
}

fn spd(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(EmError::InvalidConfig(format!("{what} must be square and non-empty")));
    }
    if m != &m.transpose() {
        return Err(EmError::InvalidConfig(format!("{what} must be symmetric")));
    }
    m.clone()
        .cholesky()
        .ok_or_else(|| EmError::InvalidConfig(format!("{what} must be positive definite")))
}

impl SyntheticQuadratic {
    /// `h` must be symmetric positive definite, `k` symmetric positive
    /// semi-definite of the same size.
    pub fn new(h: DMatrix<f64>, k: DMatrix<f64>) -> Result<Self> {
        let h_chol = spd(&h, "H")?;
        if k.shape() != h.shape() || k != k.transpose() {
            return Err(EmError::InvalidConfig("K must be symmetric with the shape of H".into()));
        }
        if k.clone().symmetric_eigen().eigenvalues.min() < 0.0 {
            return Err(EmError::InvalidConfig("K must be positive semi-definite".into()));
        }
        let h_plus_k_inv = spd(&(&h + &k), "H + K")?.inverse();
        // y_i − θ = L⁻ᵀ z has covariance H⁻¹; the √n factor is applied per draw
        let sample_factor = h_chol
            .l()
            .transpose()
            .try_inverse()
            .ok_or(EmError::SingularMatrix("Cholesky factor of H"))?;
        Ok(SyntheticQuadratic {
            h,
            k,
            h_plus_k_inv,
            sample_factor,
            has_s: true,
        })
    }

    /// Hide `s_value` so callers must go through `Q` differences.
    pub fn without_s(mut self) -> Self {
        self.has_s = false;
        self
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    fn score(&self, theta: &ParamVector, data: &SyntheticData) -> DVector<f64> {
        -(&self.h * (theta.to_dvector() - &data.mean))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    draws: Vec<DVector<f64>>,
    mean: DVector<f64>,
}

impl SyntheticData {
    pub fn new(draws: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = draws.first() else {
            return Err(EmError::InvalidData("synthetic data needs at least one draw".into()));
        };
        let d = first.len();
        if draws.iter().any(|v| v.len() != d || v.iter().any(|e| !e.is_finite())) {
            return Err(EmError::InvalidData("draws must be finite and share one dimension".into()));
        }
        let mean = draws.iter().fold(DVector::zeros(d), |acc, v| acc + v) / draws.len() as f64;
        Ok(SyntheticData { draws, mean })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn draws(&self) -> &[DVector<f64>] {
        &self.draws
    }

    /// One draw per line, whitespace-separated coordinates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut draws = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        EmError::InvalidData(format!("line {}: `{tok}` is not a number", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            draws.push(DVector::from_vec(row));
        }
        Self::new(draws)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.draws {
            out.push_str(&v.iter().map(|e| format!("{e}")).collect::<Vec<_>>().join(" "));
            out.push('\n');
        }
        out
    }
}

impl Dataset for SyntheticData {
    fn size(&self) -> usize {
        self.draws.len()
    }
}

impl EmModel for SyntheticQuadratic {
    type Data = SyntheticData;

    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn param_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("theta{i}")).collect()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_s: self.has_s,
            has_observed_loglik: true,
            has_complete_info: true,
        }
    }

    fn validate(&self, theta: &ParamVector) -> Result<()> {
        theta.expect_dim(self.dim())
    }

    fn q_value(&self, theta: &ParamVector, theta_cond: &ParamVector, data: &SyntheticData) -> Result<f64> {
        let shift = theta.to_dvector() - theta_cond.to_dvector();
        Ok(self.observed_loglik(theta, data)? - 0.5 * shift.dot(&(&self.k * &shift)))
    }

    fn s_value(&self, theta_cond: &ParamVector, data: &SyntheticData) -> Result<ParamVector> {
        if !self.has_s {
            return Err(EmError::Unsupported("s_value"));
        }
        self.validate(theta_cond)?;
        ParamVector::from_dvector(&self.score(theta_cond, data))
    }

    fn em_map(&self, theta: &ParamVector, data: &SyntheticData) -> Result<ParamVector> {
        self.validate(theta)?;
        let rhs = &self.h * &data.mean + &self.k * theta.to_dvector();
        ParamVector::from_dvector(&(&self.h_plus_k_inv * rhs))
    }

    fn sample_data(&self, theta: &ParamVector, n: usize, rng: &mut dyn RngCore) -> Result<SyntheticData> {
        self.validate(theta)?;
        if n == 0 {
            return Err(EmError::InvalidData("sample size must be >= 1".into()));
        }
        let d = self.dim();
        let scale = (n as f64).sqrt();
        let center = theta.to_dvector();
        let draws = (0..n)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                &center + &self.sample_factor * z * scale
            })
            .collect();
        SyntheticData::new(draws)
    }

    fn observed_loglik(&self, theta: &ParamVector, data: &SyntheticData) -> Result<f64> {
        self.validate(theta)?;
        let r = theta.to_dvector() - &data.mean;
        Ok(-0.5 * r.dot(&(&self.h * &r)))
    }

    fn complete_info(&self, theta: &ParamVector, data: &SyntheticData) -> Result<CompleteInfoParts> {
        self.validate(theta)?;
        let s = self.score(theta, data);
        Ok(CompleteInfoParts {
            cond_exp_neg_hessian: &self.h + &self.k,
            cond_exp_score_outer: &self.k + &s * s.transpose(),
            cond_score: ParamVector::from_dvector(&s)?,
        })
    }
}
