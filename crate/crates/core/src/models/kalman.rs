//! Kalman filter, RTS smoother and lag-one covariance smoother for
//! `x_t = A x_{t−1} + w_t`, `y_t = D x_t + v_t` with an observed `x_0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{EmError, Result};
use crate::linalg::symmetrize;

use super::ssm::{SsmData, SsmSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// `x_{t|t}` for `t = 0..=n`.
    pub filtered_means: Vec<DVector<f64>>,
    /// `P_{t|t}` for `t = 0..=n`.
    pub filtered_covs: Vec<DMatrix<f64>>,
    /// `x_{t|t−1}` for `t = 1..=n`, stored at index `t − 1`.
    pub predicted_means: Vec<DVector<f64>>,
    /// `P_{t|t−1}` for `t = 1..=n`, stored at index `t − 1`.
    pub predicted_covs: Vec<DMatrix<f64>>,
    /// Gain `K_n` of the final update.
    pub last_gain: DMatrix<f64>,
    /// Prediction-error log-likelihood of `y_1..y_n` given `x_0`.
    pub loglik: f64,
}

#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// `x_t^n` for `t = 0..=n`.
    pub means: Vec<DVector<f64>>,
    /// `P_t^n` for `t = 0..=n`.
    pub covs: Vec<DMatrix<f64>>,
    /// `P_{t,t−1}^n` for `t = 1..=n`, stored at index `t − 1`.
    pub lag_one: Vec<DMatrix<f64>>,
}

/// Forward pass started from `x_{0|0} = x_0`, `P_{0|0} = 0`, with a Joseph-form
/// covariance update.
pub fn kalman_filter(spec: &SsmSpec, q: &DMatrix<f64>, data: &SsmData) -> Result<FilterOutput> {
    let p = spec.state_dim();
    let n = data.len();
    let eye = DMatrix::<f64>::identity(p, p);

    let mut filtered_means = Vec::with_capacity(n + 1);
    let mut filtered_covs = Vec::with_capacity(n + 1);
    let mut predicted_means = Vec::with_capacity(n);
    let mut predicted_covs = Vec::with_capacity(n);
    filtered_means.push(data.x0().clone());
    filtered_covs.push(DMatrix::zeros(p, p));
    let mut loglik = 0.0;
    let mut last_gain = DMatrix::zeros(p, spec.obs_dim());

    for (idx, y) in data.y().iter().enumerate() {
        let t = idx + 1;
        let x_pred = &spec.a * &filtered_means[idx];
        let p_pred = symmetrize(&(&spec.a * &filtered_covs[idx] * spec.a.transpose() + q));

        let innovation = y - &spec.d * &x_pred;
        let f = symmetrize(&(&spec.d * &p_pred * spec.d.transpose() + &spec.r));
        let chol = f.clone().cholesky().ok_or(EmError::FilterSingularity { t })?;
        let f_inv = chol.inverse();
        let gain = &p_pred * spec.d.transpose() * &f_inv;

        let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = (innovation.transpose() * &f_inv * &innovation)[(0, 0)];
        loglik += -0.5 * (innovation.len() as f64 * LN_2PI + ln_det + quad);

        let x_filt = &x_pred + &gain * &innovation;
        let ikd = &eye - &gain * &spec.d;
        let p_filt = symmetrize(&(&ikd * &p_pred * ikd.transpose() + &gain * &spec.r * gain.transpose()));

        predicted_means.push(x_pred);
        predicted_covs.push(p_pred);
        filtered_means.push(x_filt);
        filtered_covs.push(p_filt);
        last_gain = gain;
    }

    Ok(FilterOutput {
        filtered_means,
        filtered_covs,
        predicted_means,
        predicted_covs,
        last_gain,
        loglik,
    })
}

/// RTS smoother plus the backward lag-one covariance recursion.
pub fn kalman_smoother(spec: &SsmSpec, q: &DMatrix<f64>, data: &SsmData) -> Result<SmootherOutput> {
    let filt = kalman_filter(spec, q, data)?;
    Ok(smooth(spec, &filt))
}

pub(crate) fn smooth(spec: &SsmSpec, filt: &FilterOutput) -> SmootherOutput {
    let n = filt.predicted_means.len();
    let p = spec.state_dim();
    let eye = DMatrix::<f64>::identity(p, p);

    let mut means = filt.filtered_means.clone();
    let mut covs = filt.filtered_covs.clone();
    // J_t for t = 0..n−1
    let mut gains = vec![DMatrix::zeros(p, p); n];
    for t in (0..n).rev() {
        let p_pred = &filt.predicted_covs[t];
        // a singular prediction covariance means the state is known; J = 0 then
        let p_pred_inv = p_pred
            .clone()
            .try_inverse()
            .or_else(|| p_pred.clone().pseudo_inverse(1e-12).ok())
            .unwrap_or_else(|| DMatrix::zeros(p, p));
        let j = &filt.filtered_covs[t] * spec.a.transpose() * p_pred_inv;
        means[t] = &filt.filtered_means[t] + &j * (&means[t + 1] - &filt.predicted_means[t]);
        covs[t] = symmetrize(&(&filt.filtered_covs[t] + &j * (&covs[t + 1] - p_pred) * j.transpose()));
        gains[t] = j;
    }

    let mut lag_one = vec![DMatrix::zeros(p, p); n];
    if n > 0 {
        let ikd = &eye - &filt.last_gain * &spec.d;
        lag_one[n - 1] = ikd * &spec.a * &filt.filtered_covs[n - 1];
        for t in (2..=n).rev() {
            // P_{t−1,t−2}^n from P_{t,t−1}^n
            let pf = &filt.filtered_covs[t - 1];
            let next = pf * gains[t - 2].transpose()
                + &gains[t - 1] * (&lag_one[t - 1] - &spec.a * pf) * gains[t - 2].transpose();
            lag_one[t - 2] = next;
        }
    }
    SmootherOutput { means, covs, lag_one }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_spec(r: f64) -> SsmSpec {
        SsmSpec::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, r),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
        )
        .unwrap()
    }

    fn scalar_data(ys: &[f64]) -> SsmData {
        SsmData::new(
            DVector::zeros(1),
            ys.iter().map(|&y| DVector::from_element(1, y)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn scalar_conjugate_update() {
        let (q, r, y) = (2.0, 0.5, 1.3);
        let out = kalman_filter(&scalar_spec(r), &DMatrix::from_element(1, 1, q), &scalar_data(&[y])).unwrap();
        assert!((out.filtered_means[1][0] - q / (q + r) * y).abs() < 1e-14);
        assert!((out.filtered_covs[1][(0, 0)] - q * r / (q + r)).abs() < 1e-14);
    }

    #[test]
    fn huge_measurement_noise_keeps_prediction() {
        let spec = SsmSpec::benchmark();
        let data = SsmData::new(
            DVector::from_vec(vec![1.0, -0.5, 0.3]),
            (0..4).map(|t| DVector::from_element(1, t as f64 * 2.0 - 3.0)).collect(),
        )
        .unwrap();
        let spec = SsmSpec::new(spec.a.clone(), spec.d.clone(), DMatrix::from_element(1, 1, 1e12), spec.mu.clone(), spec.sigma.clone()).unwrap();
        let out = kalman_filter(&spec, &DMatrix::identity(3, 3), &data).unwrap();
        let mut prior = data.x0().clone();
        for t in 1..=4 {
            prior = &spec.a * prior;
            assert!((&out.filtered_means[t] - &prior).amax() < 1e-6);
        }
    }

    #[test]
    fn singular_innovation_is_reported() {
        let spec = SsmSpec::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 0.0),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let err = kalman_filter(&spec, &DMatrix::from_element(1, 1, 1.0), &scalar_data(&[0.5])).unwrap_err();
        assert_eq!(err, EmError::FilterSingularity { t: 1 });
    }

    #[test]
    fn smoothed_equals_filtered_at_the_end() {
        let data = scalar_data(&[0.3, -1.0, 2.2]);
        let spec = SsmSpec::new(
            DMatrix::from_element(1, 1, 0.7),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.4),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let q = DMatrix::from_element(1, 1, 1.5);
        let filt = kalman_filter(&spec, &q, &data).unwrap();
        let sm = smooth(&spec, &filt);
        assert_eq!(sm.means[3], filt.filtered_means[3]);
        assert_eq!(sm.covs[3], filt.filtered_covs[3]);
        assert_eq!(sm.means[0], data.x0().clone());
    }

    #[test]
    fn uninformative_measurements_give_prior_moments() {
        let base = SsmSpec::benchmark();
        let spec = SsmSpec::new(base.a.clone(), DMatrix::zeros(1, 3), base.r.clone(), base.mu.clone(), base.sigma.clone()).unwrap();
        let x0 = DVector::from_vec(vec![0.5, 1.0, -2.0]);
        let data = SsmData::new(x0.clone(), (0..5).map(|t| DVector::from_element(1, t as f64)).collect()).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 2.0]));
        let sm = kalman_smoother(&spec, &q, &data).unwrap();
        let mut mean = x0;
        let mut cov = DMatrix::zeros(3, 3);
        for t in 1..=5 {
            mean = &spec.a * mean;
            cov = &spec.a * cov * spec.a.transpose() + &q;
            assert!((&sm.means[t] - &mean).amax() < 1e-10);
            assert!((&sm.covs[t] - &cov).amax() < 1e-9);
        }
    }

    #[test]
    fn lag_one_matches_gain_identity() {
        // P_{t,t−1}^n = P_t^n J_{t−1}ᵀ
        let spec = SsmSpec::benchmark();
        let data = SsmData::new(
            DVector::from_vec(vec![0.2, -0.4, 0.9]),
            [0.5, -1.2, 2.0, 0.1, -0.7, 1.1].iter().map(|&v| DVector::from_element(1, v)).collect(),
        )
        .unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.9, 1.2, 0.7]));
        let filt = kalman_filter(&spec, &q, &data).unwrap();
        let sm = smooth(&spec, &filt);
        for t in 1..=6 {
            let j = &filt.filtered_covs[t - 1]
                * spec.a.transpose()
                * filt.predicted_covs[t - 1].clone().try_inverse().unwrap();
            let expected = &sm.covs[t] * j.transpose();
            assert!((&sm.lag_one[t - 1] - expected).amax() < 1e-10, "t = {t}");
        }
    }

    #[test]
    fn covariances_symmetric_and_psd() {
        let spec = SsmSpec::benchmark();
        let data = SsmData::new(
            DVector::zeros(3),
            (0..30).map(|t| DVector::from_element(1, ((t * 7) % 5) as f64 - 2.0)).collect(),
        )
        .unwrap();
        let sm = kalman_smoother(&spec, &DMatrix::identity(3, 3), &data).unwrap();
        for c in &sm.covs {
            assert!((c - c.transpose()).amax() <= 1e-12);
            let eig = c.clone().symmetric_eigen().eigenvalues;
            assert!(eig.min() >= -1e-10);
        }
    }
}
