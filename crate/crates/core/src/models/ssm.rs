//! Linear-Gaussian state-space model with known `A, D, R, μ, Σ` and unknown
//! diagonal state-noise covariance `Q = diag(θ)`.
//!
//! The observed data are `x_0, y_1..y_n`. The E step runs the Kalman smoother
//! at `θ′` and substitutes the smoothed second moments into the complete-data
//! log-likelihood; the M step takes the diagonal of the residual scatter.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::em::{Capabilities, Dataset, EmModel, ParamVector};
use crate::error::{EmError, Result};
use crate::linalg::{from_rows, symmetrize, to_rows};

use super::kalman::{kalman_filter, smooth, SmootherOutput};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SsmSpecRows", into = "SsmSpecRows")]
pub struct SsmSpec {
    pub a: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Row-major form used in configuration files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmSpecRows {
    pub a: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

impl TryFrom<SsmSpecRows> for SsmSpec {
    type Error = EmError;
    fn try_from(rows: SsmSpecRows) -> Result<Self> {
        SsmSpec::new(
            from_rows(&rows.a)?,
            from_rows(&rows.d)?,
            from_rows(&rows.r)?,
            DVector::from_vec(rows.mu),
            from_rows(&rows.sigma)?,
        )
    }
}

impl From<SsmSpec> for SsmSpecRows {
    fn from(s: SsmSpec) -> Self {
        SsmSpecRows {
            a: to_rows(&s.a),
            d: to_rows(&s.d),
            r: to_rows(&s.r),
            mu: s.mu.iter().copied().collect(),
            sigma: to_rows(&s.sigma),
        }
    }
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(EmError::InvalidConfig(format!("{what} must be symmetric")));
    }
    if m.nrows() > 0 && m.clone().symmetric_eigen().eigenvalues.min() < -1e-12 * m.amax().max(1.0) {
        return Err(EmError::InvalidConfig(format!("{what} must be positive semi-definite")));
    }
    Ok(())
}

/// Symmetric square root of a PSD matrix, negative eigenvalues clipped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

impl SsmSpec {
    pub fn new(
        a: DMatrix<f64>,
        d: DMatrix<f64>,
        r: DMatrix<f64>,
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        let p = a.nrows();
        if p == 0 || a.ncols() != p {
            return Err(EmError::InvalidConfig("A must be square and non-empty".into()));
        }
        let q = d.nrows();
        if q == 0 || d.ncols() != p {
            return Err(EmError::InvalidConfig(format!("D must be q x {p} with q >= 1")));
        }
        if r.shape() != (q, q) {
            return Err(EmError::InvalidConfig(format!("R must be {q} x {q}")));
        }
        if mu.len() != p || sigma.shape() != (p, p) {
            return Err(EmError::InvalidConfig(format!("mu and Sigma must have state dimension {p}")));
        }
        let all = a.iter().chain(d.iter()).chain(r.iter()).chain(mu.iter()).chain(sigma.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(EmError::InvalidConfig("state-space matrices must be finite".into()));
        }
        check_psd(&r, "R")?;
        check_psd(&sigma, "Sigma")?;
        Ok(SsmSpec { a, d, r, mu, sigma })
    }

    /// The three-state, scalar-measurement benchmark instance.
    pub fn benchmark() -> Self {
        SsmSpec::new(
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.8, 0.8, -0.8]),
            DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(3),
            DMatrix::zeros(3, 3),
        )
        .expect("benchmark instance is valid")
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.d.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    q_diag: Vec<f64>,
}

impl SsmParams {
    pub fn new(q_diag: Vec<f64>) -> Result<Self> {
        for (coord, &value) in q_diag.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(EmError::InvalidParameter {
                    coord,
                    value,
                    reason: "state noise variance must be positive",
                });
            }
        }
        Ok(SsmParams { q_diag })
    }

    pub fn q_diag(&self) -> &[f64] {
        &self.q_diag
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.q_diag))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmData {
    x0: DVector<f64>,
    y: Vec<DVector<f64>>,
}

impl SsmData {
    pub fn new(x0: DVector<f64>, y: Vec<DVector<f64>>) -> Result<Self> {
        if y.is_empty() {
            return Err(EmError::InvalidData("state-space data needs at least one measurement".into()));
        }
        let q = y[0].len();
        if q == 0 || y.iter().any(|v| v.len() != q) {
            return Err(EmError::InvalidData("measurements must share one non-zero dimension".into()));
        }
        if x0.iter().chain(y.iter().flat_map(|v| v.iter())).any(|v| !v.is_finite()) {
            return Err(EmError::InvalidData("state-space data must be finite".into()));
        }
        Ok(SsmData { x0, y })
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn y(&self) -> &[DVector<f64>] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn check_against(&self, spec: &SsmSpec) -> Result<()> {
        if self.x0.len() != spec.state_dim() || self.y[0].len() != spec.obs_dim() {
            return Err(EmError::InvalidData(format!(
                "data shape (x0 {}, y {}) does not match the model (p = {}, q = {})",
                self.x0.len(),
                self.y[0].len(),
                spec.state_dim(),
                spec.obs_dim()
            )));
        }
        Ok(())
    }

    /// First non-comment line holds `x_0`; each following line holds one `y_t`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
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
            rows.push(DVector::from_vec(row));
        }
        if rows.is_empty() {
            return Err(EmError::InvalidData("missing x0 header line".into()));
        }
        let x0 = rows.remove(0);
        Self::new(x0, rows)
    }

    pub fn to_text(&self) -> String {
        let line = |v: &DVector<f64>| v.iter().map(|e| format!("{e}")).collect::<Vec<_>>().join(" ");
        let mut out = format!("{}\n", line(&self.x0));
        for y in &self.y {
            out.push_str(&line(y));
            out.push('\n');
        }
        out
    }
}

impl Dataset for SsmData {
    fn size(&self) -> usize {
        self.y.len()
    }
}

/// Draw `x_0, y_1..y_n`. Entries of `q_diag` may be zero here, which gives a
/// noiseless state recursion.
pub fn ssm_simulate(spec: &SsmSpec, q_diag: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<SsmData> {
    let p = spec.state_dim();
    if q_diag.len() != p {
        return Err(EmError::DimensionMismatch {
            expected: p,
            got: q_diag.len(),
        });
    }
    if let Some((coord, &value)) = q_diag.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        return Err(EmError::InvalidParameter {
            coord,
            value,
            reason: "state noise variance must be non-negative",
        });
    }
    if n == 0 {
        return Err(EmError::InvalidData("horizon must be >= 1".into()));
    }
    let mut normals = |k: usize| DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));

    let x0 = if spec.sigma.iter().all(|&v| v == 0.0) {
        spec.mu.clone()
    } else {
        &spec.mu + psd_sqrt(&spec.sigma) * normals(p)
    };
    let q_sd = DVector::from_iterator(p, q_diag.iter().map(|v| v.sqrt()));
    let r_sqrt = psd_sqrt(&spec.r);
    let mut x = x0.clone();
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        x = &spec.a * &x + q_sd.component_mul(&normals(p));
        y.push(&spec.d * &x + &r_sqrt * normals(spec.obs_dim()));
    }
    SsmData::new(x0, y)
}

/// Smoothed second-moment sums `S_11 = Σ E[x_t x_tᵀ]`, `S_10 = Σ E[x_t x_{t−1}ᵀ]`,
/// `S_00 = Σ E[x_{t−1} x_{t−1}ᵀ]` over `t = 1..n`.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub s11: DMatrix<f64>,
    pub s10: DMatrix<f64>,
    pub s00: DMatrix<f64>,
    /// `Σ E[(y_t − D x_t)(y_t − D x_t)ᵀ]`.
    pub measurement_scatter: DMatrix<f64>,
    pub n: usize,
}

impl SufficientStats {
    pub fn from_smoother(spec: &SsmSpec, sm: &SmootherOutput, data: &SsmData) -> Self {
        let p = spec.state_dim();
        let mut s11 = DMatrix::zeros(p, p);
        let mut s10 = DMatrix::zeros(p, p);
        let mut s00 = DMatrix::zeros(p, p);
        let mut scatter = DMatrix::zeros(spec.obs_dim(), spec.obs_dim());
        for t in 1..=data.len() {
            let (xt, xp) = (&sm.means[t], &sm.means[t - 1]);
            s11 += xt * xt.transpose() + &sm.covs[t];
            s10 += xt * xp.transpose() + &sm.lag_one[t - 1];
            s00 += xp * xp.transpose() + &sm.covs[t - 1];
            let resid = &data.y[t - 1] - &spec.d * xt;
            scatter += &resid * resid.transpose() + &spec.d * &sm.covs[t] * spec.d.transpose();
        }
        SufficientStats {
            s11,
            s10,
            s00,
            measurement_scatter: scatter,
            n: data.len(),
        }
    }

    /// `Γ = S_11 − S_10 Aᵀ − A S_10ᵀ + A S_00 Aᵀ`.
    pub fn state_scatter(&self, spec: &SsmSpec) -> DMatrix<f64> {
        let a = &spec.a;
        symmetrize(&(&self.s11 - &self.s10 * a.transpose() - a * self.s10.transpose() + a * &self.s00 * a.transpose()))
    }
}

/// The state-space EM problem for a fixed [`SsmSpec`].
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    spec: SsmSpec,
}

impl StateSpaceModel {
    pub fn new(spec: SsmSpec) -> Self {
        StateSpaceModel { spec }
    }

    pub fn spec(&self) -> &SsmSpec {
        &self.spec
    }

    fn params(&self, theta: &ParamVector) -> Result<SsmParams> {
        theta.expect_dim(self.spec.state_dim())?;
        SsmParams::new(theta.as_slice().to_vec())
    }

    /// Smoother pass at `theta_cond` reduced to sufficient statistics.
    pub fn e_step(&self, theta_cond: &ParamVector, data: &SsmData) -> Result<SufficientStats> {
        let q = self.params(theta_cond)?.q_matrix();
        data.check_against(&self.spec)?;
        let filt = kalman_filter(&self.spec, &q, data)?;
        let sm = smooth(&self.spec, &filt);
        Ok(SufficientStats::from_smoother(&self.spec, &sm, data))
    }

    /// Diagonal-constrained maximizer `Q_i = Γ_ii / n`.
    pub fn m_step(&self, stats: &SufficientStats) -> Result<ParamVector> {
        let gamma = stats.state_scatter(&self.spec);
        let q: Vec<f64> = (0..self.spec.state_dim()).map(|i| gamma[(i, i)] / stats.n as f64).collect();
        if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(EmError::DegenerateUpdate(format!("Q_{} update is {v}", i + 1)));
        }
        ParamVector::new(q)
    }

    fn q_from_stats(&self, params: &SsmParams, stats: &SufficientStats) -> f64 {
        let gamma = stats.state_scatter(&self.spec);
        let n = stats.n as f64;
        let mut q = 0.0;
        for (i, &qi) in params.q_diag().iter().enumerate() {
            q += -0.5 * n * qi.ln() - 0.5 * gamma[(i, i)] / qi;
        }
        // θ-free measurement term, kept when R is invertible
        if let Some(chol) = self.spec.r.clone().cholesky() {
            let ln_det_r: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            q += -0.5 * n * ln_det_r - 0.5 * (chol.inverse() * &stats.measurement_scatter).trace();
        }
        q
    }
}

impl EmModel for StateSpaceModel {
    type Data = SsmData;

    fn dim(&self) -> usize {
        self.spec.state_dim()
    }

    fn param_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("Q{i}")).collect()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            has_s: true,
            has_observed_loglik: true,
            has_complete_info: false,
        }
    }

    fn validate(&self, theta: &ParamVector) -> Result<()> {
        self.params(theta).map(|_| ())
    }

    fn q_value(&self, theta: &ParamVector, theta_cond: &ParamVector, data: &SsmData) -> Result<f64> {
        let params = self.params(theta)?;
        let stats = self.e_step(theta_cond, data)?;
        Ok(self.q_from_stats(&params, &stats))
    }

    fn q_value_pair(
        &self,
        theta_a: &ParamVector,
        theta_b: &ParamVector,
        theta_cond: &ParamVector,
        data: &SsmData,
    ) -> Result<(f64, f64)> {
        let (a, b) = (self.params(theta_a)?, self.params(theta_b)?);
        let stats = self.e_step(theta_cond, data)?;
        Ok((self.q_from_stats(&a, &stats), self.q_from_stats(&b, &stats)))
    }

    fn s_value(&self, theta_cond: &ParamVector, data: &SsmData) -> Result<ParamVector> {
        let params = self.params(theta_cond)?;
        let stats = self.e_step(theta_cond, data)?;
        let gamma = stats.state_scatter(&self.spec);
        let n = stats.n as f64;
        ParamVector::new(
            params
                .q_diag()
                .iter()
                .enumerate()
                .map(|(i, &qi)| -0.5 * n / qi + 0.5 * gamma[(i, i)] / (qi * qi))
                .collect(),
        )
    }

    fn em_map(&self, theta: &ParamVector, data: &SsmData) -> Result<ParamVector> {
        let stats = self.e_step(theta, data)?;
        self.m_step(&stats)
    }

    fn sample_data(&self, theta: &ParamVector, n: usize, rng: &mut dyn RngCore) -> Result<SsmData> {
        let params = self.params(theta)?;
        ssm_simulate(&self.spec, params.q_diag(), n, rng)
    }

    fn observed_loglik(&self, theta: &ParamVector, data: &SsmData) -> Result<f64> {
        let q = self.params(theta)?.q_matrix();
        data.check_against(&self.spec)?;
        Ok(kalman_filter(&self.spec, &q, data)?.loglik)
    }
}

/// Mean and covariance of the stacked measurements `(y_1, .., y_n)` given
/// `x_0`, built directly from `x_t = A^t x_0 + Σ_s A^{t−s} w_s`.
pub fn ssm_dense_moments(
    spec: &SsmSpec,
    q: &DMatrix<f64>,
    x0: &DVector<f64>,
    n: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let (p, m) = (spec.state_dim(), spec.obs_dim());
    let state_cov = dense_state_cov(spec, q, n);
    let mut mean = DVector::zeros(n * m);
    let mut x = x0.clone();
    for t in 0..n {
        x = &spec.a * x;
        mean.rows_mut(t * m, m).copy_from(&(&spec.d * &x));
    }
    let mut cov = DMatrix::zeros(n * m, n * m);
    for t in 0..n {
        for u in 0..n {
            let block = &spec.d * state_cov.view((t * p, u * p), (p, p)) * spec.d.transpose();
            cov.view_mut((t * m, u * m), (m, m)).copy_from(&block);
        }
        let mut diag = cov.view_mut((t * m, t * m), (m, m));
        diag += &spec.r;
    }
    (mean, cov)
}

/// Covariance of the stacked states `(x_1, .., x_n)` given `x_0`.
pub fn dense_state_cov(spec: &SsmSpec, q: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let p = spec.state_dim();
    let mut powers = vec![DMatrix::identity(p, p)];
    for k in 1..n {
        powers.push(&spec.a * &powers[k - 1]);
    }
    let mut cov = DMatrix::zeros(n * p, n * p);
    for t in 1..=n {
        for u in 1..=n {
            let mut block = DMatrix::zeros(p, p);
            for s in 1..=t.min(u) {
                block += &powers[t - s] * q * powers[u - s].transpose();
            }
            cov.view_mut(((t - 1) * p, (u - 1) * p), (p, p)).copy_from(&block);
        }
    }
    cov
}

/// Expected information for `diag(Q)` from the dense Gaussian law of the
/// measurements: `I_ij = ½ tr(Σ⁻¹ ∂_iΣ Σ⁻¹ ∂_jΣ)`. The mean does not depend on
/// `Q`, so `x_0` does not enter.
pub fn ssm_expected_fim_oracle(spec: &SsmSpec, params: &SsmParams, n: usize) -> Result<DMatrix<f64>> {
    let p = spec.state_dim();
    if params.q_diag().len() != p {
        return Err(EmError::DimensionMismatch {
            expected: p,
            got: params.q_diag().len(),
        });
    }
    let x0 = DVector::zeros(p);
    let (_, cov) = ssm_dense_moments(spec, &params.q_matrix(), &x0, n);
    let cov_inv = cov
        .cholesky()
        .ok_or_else(|| EmError::OracleFailure("measurement covariance is not positive definite".into()))?
        .inverse();
    let zero_r = SsmSpec {
        r: DMatrix::zeros(spec.obs_dim(), spec.obs_dim()),
        ..spec.clone()
    };
    let weighted: Vec<DMatrix<f64>> = (0..p)
        .map(|i| {
            let mut e = DMatrix::zeros(p, p);
            e[(i, i)] = 1.0;
            let (_, d_cov) = ssm_dense_moments(&zero_r, &e, &x0, n);
            &cov_inv * d_cov
        })
        .collect();
    let mut info = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let v = 0.5 * (&weighted[i] * &weighted[j]).trace();
            info[(i, j)] = v;
            info[(j, i)] = v;
        }
    }
    Ok(info)
}

/// Gaussian log-density of the stacked measurements, for checking the filter.
pub fn ssm_dense_loglik(spec: &SsmSpec, q: &DMatrix<f64>, data: &SsmData) -> Result<f64> {
    let (mean, cov) = ssm_dense_moments(spec, q, data.x0(), data.len());
    let y = DVector::from_iterator(mean.len(), data.y().iter().flat_map(|v| v.iter().copied()));
    let chol = cov
        .cholesky()
        .ok_or_else(|| EmError::OracleFailure("measurement covariance is not positive definite".into()))?;
    let resid = y - mean;
    let solved = chol.solve(&resid);
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (resid.len() as f64 * LN_2PI + ln_det + resid.dot(&solved)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::stream;

    fn theta(v: &[f64]) -> ParamVector {
        ParamVector::from_slice(v).unwrap()
    }

    #[test]
    fn noiseless_simulation_is_the_linear_recursion() {
        let base = SsmSpec::benchmark();
        let spec = SsmSpec::new(
            base.a.clone(),
            base.d.clone(),
            DMatrix::zeros(1, 1),
            DVector::from_vec(vec![1.0, 0.0, -1.0]),
            base.sigma.clone(),
        )
        .unwrap();
        let data = ssm_simulate(&spec, &[0.0, 0.0, 0.0], 6, &mut stream(3, 0)).unwrap();
        let mut x = spec.mu.clone();
        assert_eq!(data.x0(), &x);
        for y in data.y() {
            x = &spec.a * x;
            assert!((y[0] - x[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = SsmSpec::benchmark();
        let a = ssm_simulate(&spec, &[1.0, 1.0, 1.0], 20, &mut stream(5, 7)).unwrap();
        let b = ssm_simulate(&spec, &[1.0, 1.0, 1.0], 20, &mut stream(5, 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulated_state_noise_has_unit_variance() {
        // with R = 0 and D = I the states are observed, so w_t = y_t − A y_{t−1}
        let base = SsmSpec::benchmark();
        let spec = SsmSpec::new(
            base.a.clone(),
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 3),
            base.mu.clone(),
            base.sigma.clone(),
        )
        .unwrap();
        let n = 10_000;
        let data = ssm_simulate(&spec, &[1.0, 1.0, 1.0], n, &mut stream(11, 0)).unwrap();
        let mut prev = data.x0().clone();
        let mut sq = DVector::<f64>::zeros(3);
        for y in data.y() {
            let w = y - &spec.a * &prev;
            sq += w.component_mul(&w);
            prev = y.clone();
        }
        // Var(w²) = 2 for a standard normal
        let se = (2.0 / n as f64).sqrt();
        for i in 0..3 {
            assert!((sq[i] / n as f64 - 1.0).abs() < 3.0 * se, "coord {i}");
        }
    }

    #[test]
    fn exact_states_give_residual_mean_square() {
        let base = SsmSpec::benchmark();
        let spec = SsmSpec::new(
            base.a.clone(),
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 3),
            base.mu.clone(),
            base.sigma.clone(),
        )
        .unwrap();
        let data = ssm_simulate(&spec, &[0.5, 1.5, 2.0], 40, &mut stream(12, 0)).unwrap();
        let model = StateSpaceModel::new(spec.clone());
        let m = model.em_map(&theta(&[1.0, 1.0, 1.0]), &data).unwrap();
        let mut prev = data.x0().clone();
        let mut sq = DVector::<f64>::zeros(3);
        for y in data.y() {
            let w = y - &spec.a * &prev;
            sq += w.component_mul(&w);
            prev = y.clone();
        }
        for i in 0..3 {
            assert!((m[i] - sq[i] / 40.0).abs() < 1e-9);
        }
    }

    #[test]
    fn filter_loglik_matches_dense_density() {
        let spec = SsmSpec::benchmark();
        let data = ssm_simulate(&spec, &[1.0, 1.0, 1.0], 8, &mut stream(21, 0)).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.8, 1.3, 0.6]));
        let filt = kalman_filter(&spec, &q, &data).unwrap().loglik;
        let dense = ssm_dense_loglik(&spec, &q, &data).unwrap();
        assert!((filt - dense).abs() < 1e-8, "{filt} vs {dense}");
    }

    #[test]
    fn score_matches_q_difference() {
        let spec = SsmSpec::benchmark();
        let model = StateSpaceModel::new(spec.clone());
        let data = ssm_simulate(&spec, &[1.0, 1.0, 1.0], 30, &mut stream(22, 0)).unwrap();
        let cond = theta(&[0.9, 1.1, 1.2]);
        let s = model.s_value(&cond, &data).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let mut e = [0.0; 3];
            e[i] = h;
            let qp = model.q_value(&cond.offset(&e, 1.0).unwrap(), &cond, &data).unwrap();
            let qm = model.q_value(&cond.offset(&e, -1.0).unwrap(), &cond, &data).unwrap();
            let fd = (qp - qm) / (2.0 * h);
            assert!((s[i] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "coord {i}");
        }
    }

    #[test]
    fn q_pair_equals_separate_evaluations() {
        let spec = SsmSpec::benchmark();
        let model = StateSpaceModel::new(spec.clone());
        let data = ssm_simulate(&spec, &[1.0, 1.0, 1.0], 15, &mut stream(23, 0)).unwrap();
        let (a, b, cond) = (theta(&[0.9, 1.0, 1.1]), theta(&[1.2, 0.8, 1.0]), theta(&[1.0, 1.0, 1.0]));
        let pair = model.q_value_pair(&a, &b, &cond, &data).unwrap();
        assert_eq!(pair.0, model.q_value(&a, &cond, &data).unwrap());
        assert_eq!(pair.1, model.q_value(&b, &cond, &data).unwrap());
    }

    #[test]
    fn non_positive_variance_is_rejected() {
        let model = StateSpaceModel::new(SsmSpec::benchmark());
        assert!(matches!(
            model.validate(&theta(&[1.0, 0.0, 1.0])),
            Err(EmError::InvalidParameter { coord: 1, .. })
        ));
    }

    #[test]
    fn data_text_roundtrip() {
        let data = ssm_simulate(&SsmSpec::benchmark(), &[1.0, 1.0, 1.0], 5, &mut stream(1, 1)).unwrap();
        assert_eq!(SsmData::parse(&data.to_text()).unwrap(), data);
        assert!(SsmData::parse("0 0 0\n").is_err());
    }

    #[test]
    fn spec_validation() {
        let b = SsmSpec::benchmark();
        let bad_r = SsmSpec::new(b.a.clone(), b.d.clone(), DMatrix::from_element(1, 1, -1.0), b.mu.clone(), b.sigma.clone());
        assert!(bad_r.is_err());
        let bad_d = SsmSpec::new(b.a.clone(), DMatrix::zeros(1, 2), b.r.clone(), b.mu.clone(), b.sigma.clone());
        assert!(bad_d.is_err());
    }

    #[test]
    fn oracle_is_symmetric_positive_definite() {
        let params = SsmParams::new(vec![0.9372, 0.9863, 1.0536]).unwrap();
        let info = ssm_expected_fim_oracle(&SsmSpec::benchmark(), &params, 100).unwrap();
        assert_eq!(info, info.transpose());
        assert!(info.symmetric_eigen().eigenvalues.min() > 0.0);
    }
}
