//! Classical observed-information routes used to validate the Monte Carlo
//! estimator: Louis's identity, Oakes's identity, the supplemented EM (SEM)
//! algorithm, and a simultaneous-perturbation estimate of the EM-map Jacobian.
//!
//! Every `DM` matrix in this module follows the SEM indexing: entry `(i, j)`
//! is `∂M_j / ∂θ_i`, the transpose of the usual Jacobian. With that
//! convention the observed information is `(I − DM) · I_oc` where `I_oc` is
//! the conditional expected complete-data information.

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::em::{EmModel, EmTrace, ParamVector};
use crate::error::{EmError, Result};
use crate::fd;
use crate::linalg::symmetrize;
use crate::spsa::gen_perturbation;

/// Conditional expectations (given `Y` and `θ*`) of complete-data derivatives,
/// summed over the whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteInfoParts {
    /// `E[−∂²L/∂θ∂θᵀ | Y, θ*]`.
    pub cond_exp_neg_hessian: DMatrix<f64>,
    /// `E[(∂L/∂θ)(∂L/∂θ)ᵀ | Y, θ*]`.
    pub cond_exp_score_outer: DMatrix<f64>,
    /// `E[∂L/∂θ | Y, θ*]`.
    pub cond_score: ParamVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmMethod {
    Sem,
    Spsa,
    OracleFd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmEstimate {
    /// Entry `(i, j)` estimates `∂M_j / ∂θ_i`.
    pub matrix: DMatrix<f64>,
    pub method: DmMethod,
    /// SEM: largest iterate index consumed. SPSA: number of perturbations.
    /// Finite differences: `2d` EM steps.
    pub iterations_used: usize,
}

/// Louis: `E[−H_c] − E[s_c s_cᵀ] + E[s_c] E[s_c]ᵀ`, all given `Y` at `θ*`.
pub fn louis_fim<M: EmModel>(model: &M, theta_star: &ParamVector, data: &M::Data) -> Result<DMatrix<f64>> {
    if !model.capabilities().has_complete_info {
        return Err(EmError::Unsupported("complete_info"));
    }
    let parts = model.complete_info(theta_star, data)?;
    let s = parts.cond_score.to_dvector();
    Ok(&parts.cond_exp_neg_hessian - &parts.cond_exp_score_outer + &s * s.transpose())
}

/// Oakes: `−[∂²Q/∂θ∂θᵀ + ∂²Q/∂θ∂θ′ᵀ]` at `θ = θ′ = θ*`, from central
/// differences with steps `fd_step · max(1, |θ_i|)`.
///
/// With `S` available the sum is the derivative of `θ′ ↦ S(θ′)`, so one
/// Jacobian of `s_value` suffices. Otherwise both terms come from `q_value`.
pub fn oakes_fim<M: EmModel>(
    model: &M,
    theta_star: &ParamVector,
    data: &M::Data,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    theta_star.expect_dim(model.dim())?;
    let d = model.dim();
    let steps = fd::scaled_steps(theta_star.as_slice(), fd_step)?;
    if model.capabilities().has_s {
        let jac = fd::jacobian(
            |x| Ok(model.s_value(&ParamVector::from_slice(x)?, data)?.into()),
            theta_star.as_slice(),
            &steps,
        )?;
        return Ok(-symmetrize(&jac));
    }
    let unit = |i: usize| {
        let mut e = vec![0.0; d];
        e[i] = steps[i];
        e
    };

    let at_cond = |x: &[f64]| model.q_value(&ParamVector::from_slice(x)?, theta_star, data);
    let curvature = fd::hessian(at_cond, theta_star.as_slice(), &steps)?;

    let mut mixed = DMatrix::zeros(d, d);
    for i in 0..d {
        let theta_plus = theta_star.offset(&unit(i), 1.0)?;
        let theta_minus = theta_star.offset(&unit(i), -1.0)?;
        for j in 0..d {
            let cond_plus = theta_star.offset(&unit(j), 1.0)?;
            let cond_minus = theta_star.offset(&unit(j), -1.0)?;
            let v = model.q_value(&theta_plus, &cond_plus, data)?
                - model.q_value(&theta_plus, &cond_minus, data)?
                - model.q_value(&theta_minus, &cond_plus, data)?
                + model.q_value(&theta_minus, &cond_minus, data)?;
            mixed[(i, j)] = v / (4.0 * steps[i] * steps[j]);
        }
    }
    Ok(-symmetrize(&(curvature + mixed)))
}

/// Smallest usable `|θ_i^(t) − θ_i*|` relative to `max(1, |θ_i*|)`; below it the
/// SEM difference quotient is dominated by rounding.
const SEM_GAP_FLOOR: f64 = 1e-9;

/// SEM estimate of `DM` from the EM trace, starting at the second iterate.
///
/// For each coordinate `i`, iterate `t = 2, 3, ...` and form
/// `r_ij^(t) = [M_j(θ* with θ_i ← θ_i^(t)) − M_j(θ*)] / (θ_i^(t) − θ_i*)`;
/// entry `(i, j)` is the first `r_ij^(t+1)` within `stability_tol` of `r_ij^(t)`.
pub fn sem_dm<M: EmModel>(
    model: &M,
    data: &M::Data,
    trace: &EmTrace,
    theta_star: &ParamVector,
    stability_tol: f64,
) -> Result<DmEstimate> {
    let d = model.dim();
    theta_star.expect_dim(d)?;
    if !(stability_tol > 0.0) {
        return Err(EmError::InvalidConfig(format!(
            "SEM stability tolerance must be positive, got {stability_tol}"
        )));
    }
    if trace.iterates.len() < 3 {
        return Err(EmError::InvalidConfig(format!(
            "SEM needs at least 3 EM iterates, trace has {}",
            trace.iterates.len()
        )));
    }
    let m_star = model.em_map(theta_star, data)?;
    let mut dm = DMatrix::zeros(d, d);
    let mut iterations_used = 0;

    for i in 0..d {
        let floor = SEM_GAP_FLOOR * theta_star[i].abs().max(1.0);
        let mut previous: Option<Vec<f64>> = None;
        let mut settled = vec![false; d];
        let mut t = 2;
        loop {
            let Some(iterate) = trace.iterates.get(t) else {
                let j = settled.iter().position(|s| !s).unwrap_or(0);
                return Err(EmError::SemNotStable { i, j });
            };
            let gap = iterate[i] - theta_star[i];
            if gap.abs() <= floor {
                if previous.is_none() {
                    return Err(EmError::CoordinateDegenerate { coord: i, gap: gap.abs() });
                }
                let j = settled.iter().position(|s| !s).unwrap_or(0);
                return Err(EmError::SemNotStable { i, j });
            }
            let mapped = model.em_map(&theta_star.with_coord(i, iterate[i])?, data)?;
            let ratios: Vec<f64> = (0..d).map(|j| (mapped[j] - m_star[j]) / gap).collect();
            if let Some(prev) = &previous {
                for j in 0..d {
                    if !settled[j] && (ratios[j] - prev[j]).abs() < stability_tol {
                        dm[(i, j)] = ratios[j];
                        settled[j] = true;
                    }
                }
            }
            iterations_used = iterations_used.max(t);
            if settled.iter().all(|&s| s) {
                break;
            }
            previous = Some(ratios);
            t += 1;
        }
    }
    Ok(DmEstimate {
        matrix: dm,
        method: DmMethod::Sem,
        iterations_used,
    })
}

/// `(I − DM) · E[−∂²L/∂θ∂θᵀ | Y, θ*]`.
pub fn sem_fim<M: EmModel>(
    model: &M,
    dm: &DmEstimate,
    theta_star: &ParamVector,
    data: &M::Data,
) -> Result<DMatrix<f64>> {
    if !model.capabilities().has_complete_info {
        return Err(EmError::Unsupported("complete_info"));
    }
    let d = model.dim();
    if dm.matrix.shape() != (d, d) {
        return Err(EmError::DimensionMismatch {
            expected: d,
            got: dm.matrix.nrows(),
        });
    }
    let parts = model.complete_info(theta_star, data)?;
    Ok((DMatrix::identity(d, d) - &dm.matrix) * parts.cond_exp_neg_hessian)
}

/// Average over `n_samples` Bernoulli `±c` perturbations of
/// `[M_j(θ* + Δ_k) − M_j(θ* − Δ_k)] / (2 Δ_ki)`.
pub fn spsa_dm<M: EmModel>(
    model: &M,
    data: &M::Data,
    theta_star: &ParamVector,
    c: f64,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<DmEstimate> {
    let d = model.dim();
    theta_star.expect_dim(d)?;
    if !(c > 0.0 && c.is_finite()) {
        return Err(EmError::InvalidConfig(format!("SPSA-DM c must be positive, got {c}")));
    }
    if n_samples < 1 {
        return Err(EmError::InvalidConfig("SPSA-DM needs at least one sample".into()));
    }
    let mut sum = DMatrix::zeros(d, d);
    for k in 0..n_samples {
        let delta = gen_perturbation(c, d, rng);
        let step = |sign: f64| -> Result<ParamVector> {
            let theta = theta_star.offset(delta.as_slice(), sign)?;
            model.validate(&theta).map_err(|e| match e {
                EmError::InvalidParameter { coord, value, .. }
                | EmError::BoundaryParameter { coord, value } => {
                    EmError::PerturbationOutOfDomain { coord, value }
                }
                other => other,
            })?;
            model.em_map(&theta, data)
        };
        let (plus, minus) = match (step(1.0), step(-1.0)) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => return Err(e.at_replicate(k)),
        };
        for i in 0..d {
            for j in 0..d {
                sum[(i, j)] += (plus[j] - minus[j]) / (2.0 * delta.as_slice()[i]);
            }
        }
    }
    Ok(DmEstimate {
        matrix: sum / n_samples as f64,
        method: DmMethod::Spsa,
        iterations_used: n_samples,
    })
}

/// Central-difference Jacobian of `em_map` at `θ*`, in SEM indexing.
pub fn fd_dm<M: EmModel>(
    model: &M,
    data: &M::Data,
    theta_star: &ParamVector,
    fd_step: f64,
) -> Result<DmEstimate> {
    let d = model.dim();
    theta_star.expect_dim(d)?;
    let steps = fd::scaled_steps(theta_star.as_slice(), fd_step)?;
    let jac = fd::jacobian(
        |x| Ok(model.em_map(&ParamVector::from_slice(x)?, data)?.into()),
        theta_star.as_slice(),
        &steps,
    )?;
    Ok(DmEstimate {
        matrix: jac.transpose(),
        method: DmMethod::OracleFd,
        iterations_used: 2 * d,
    })
}

/// Negative central-difference Hessian of `L_O` at `θ*`.
pub fn fd_observed_fim<M: EmModel>(
    model: &M,
    theta_star: &ParamVector,
    data: &M::Data,
    fd_step: f64,
) -> Result<DMatrix<f64>> {
    theta_star.expect_dim(model.dim())?;
    if !model.capabilities().has_observed_loglik {
        return Err(EmError::Unsupported("observed_loglik"));
    }
    let steps = fd::scaled_steps(theta_star.as_slice(), fd_step)?;
    let h = fd::hessian(
        |x| model.observed_loglik(&ParamVector::from_slice(x)?, data),
        theta_star.as_slice(),
        &steps,
    )?;
    Ok(-h)
}
