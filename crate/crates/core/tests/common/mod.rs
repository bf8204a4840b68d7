use emfim::models::ssm::{dense_state_cov, ssm_dense_moments};
use emfim::models::{SsmData, SsmSpec};
use nalgebra::{DMatrix, DVector};

/// Conditional law of the stacked states given the measurements, from the
/// joint Gaussian.
pub fn dense_posterior(spec: &SsmSpec, q: &DMatrix<f64>, data: &SsmData) -> (DVector<f64>, DMatrix<f64>) {
    let (p, m, n) = (spec.state_dim(), spec.obs_dim(), data.len());
    let sxx = dense_state_cov(spec, q, n);
    let (my, syy) = ssm_dense_moments(spec, q, data.x0(), n);
    let mut mx = DVector::zeros(n * p);
    let mut x = data.x0().clone();
    for t in 0..n {
        x = &spec.a * x;
        mx.rows_mut(t * p, p).copy_from(&x);
    }
    // Cov(X, Y) = Cov(X) (I ⊗ Dᵀ)
    let mut big_d = DMatrix::zeros(n * m, n * p);
    for t in 0..n {
        big_d.view_mut((t * m, t * p), (m, p)).copy_from(&spec.d);
    }
    let sxy = &sxx * big_d.transpose();
    let y = DVector::from_iterator(n * m, data.y().iter().flat_map(|v| v.iter().copied()));
    let gain = &sxy * syy.try_inverse().unwrap();
    let mean = mx + &gain * (y - my);
    let cov = &sxx - &gain * sxy.transpose();
    (mean, cov)
}

