//! Simultaneous-perturbation Hessian sampling of the E-step score and the
//! Monte Carlo Fisher information estimate built on it.
//!
//! Each replicate `k` perturbs `θ*` by a Bernoulli `±c` vector `Δ_k`, evaluates
//! the score `S` on both sides (directly, or from four `Q` values through a
//! second perturbation `Δ̂_k`), and forms the symmetrized one-sample Hessian
//!
//! ```text
//! Ĥ_k = ½ { (δS_k / 2) [Δ_k1⁻¹ … Δ_kd⁻¹] + transpose },   δS_k = S(θ* + Δ_k) − S(θ* − Δ_k)
//! ```
//!
//! The information estimate is `−(1/N) Σ_k Ĥ_k`. In expected mode every
//! replicate draws fresh pseudodata at `θ*`; in observed mode the data stay
//! fixed and only the perturbations change.

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{Dataset, EmModel, ParamVector};
use crate::error::{EmError, Result};
use crate::linalg::pairwise_sum;
use crate::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimMode {
    Expected,
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Model-supplied `S(θ | Y)`.
    DirectS,
    /// Simultaneous-perturbation differences of `Q`.
    QDifferences,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpsaConfig {
    pub c: f64,
    #[serde(rename = "N")]
    pub n_replicates: usize,
    pub seed: u64,
    pub mode: FimMode,
    pub gradient_source: GradientSource,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        SpsaConfig {
            c: 0.01,
            n_replicates: 10_000,
            seed: 0,
            mode: FimMode::Expected,
            gradient_source: GradientSource::DirectS,
        }
    }
}

impl SpsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(EmError::InvalidConfig(format!("spsa.c must be positive, got {}", self.c)));
        }
        if self.n_replicates < 1 {
            return Err(EmError::InvalidConfig("spsa.N must be >= 1".into()));
        }
        Ok(())
    }
}

/// Probe direction with every entry equal to `+c` or `−c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationVector(Vec<f64>);

impl PerturbationVector {
    /// Wrap arbitrary entries. Used for synthetic checks; zero entries are
    /// rejected later by [`hessian_sample_from_gradients`].
    pub fn from_entries(entries: Vec<f64>) -> Self {
        PerturbationVector(entries)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    fn reciprocals(&self) -> Result<Vec<f64>> {
        self.0
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                if v == 0.0 || !v.is_finite() {
                    Err(EmError::InvalidPerturbation { index })
                } else {
                    Ok(1.0 / v)
                }
            })
            .collect()
    }
}

/// `d` independent Bernoulli `±c` entries.
pub fn gen_perturbation(c: f64, d: usize, rng: &mut dyn RngCore) -> PerturbationVector {
    PerturbationVector((0..d).map(|_| if rng.random::<bool>() { c } else { -c }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianSample {
    pub matrix: DMatrix<f64>,
    pub replicate_index: usize,
}

/// Symmetrized one-sample Hessian from a pair of gradients at `θ ± Δ`.
pub fn hessian_sample_from_gradients(
    s_plus: &ParamVector,
    s_minus: &ParamVector,
    delta: &PerturbationVector,
) -> Result<HessianSample> {
    let d = delta.dim();
    s_plus.expect_dim(d)?;
    s_minus.expect_dim(d)?;
    let inv = delta.reciprocals()?;
    let half_ds: Vec<f64> = (0..d).map(|i| 0.5 * (s_plus[i] - s_minus[i])).collect();

    let mut matrix = DMatrix::zeros(d, d);
    for i in 0..d {
        matrix[(i, i)] = half_ds[i] * inv[i];
        for j in (i + 1)..d {
            let v = 0.5 * (half_ds[i] * inv[j] + half_ds[j] * inv[i]);
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(EmError::InvalidPerturbation { index: 0 });
    }
    Ok(HessianSample {
        matrix,
        replicate_index: 0,
    })
}

/// Check that a perturbed probe lies in the model's domain, reporting the
/// offending coordinate otherwise.
fn probe<M: EmModel>(model: &M, theta: ParamVector) -> Result<ParamVector> {
    match model.validate(&theta) {
        Ok(()) => Ok(theta),
        Err(EmError::InvalidParameter { coord, value, .. })
        | Err(EmError::BoundaryParameter { coord, value }) => {
            Err(EmError::PerturbationOutOfDomain { coord, value })
        }
        Err(other) => Err(other),
    }
}

/// Score estimate at `theta_center` from two `Q` values:
/// `[Q(θ_c + Δ̂ | θ_c) − Q(θ_c − Δ̂ | θ_c)] / 2 · [Δ̂₁⁻¹ … Δ̂_d⁻¹]ᵀ`.
pub fn s_hat_from_q<M: EmModel>(
    model: &M,
    theta_center: &ParamVector,
    delta_hat: &PerturbationVector,
    data: &M::Data,
) -> Result<ParamVector> {
    theta_center.expect_dim(delta_hat.dim())?;
    let inv = delta_hat.reciprocals()?;
    let plus = probe(model, theta_center.offset(delta_hat.as_slice(), 1.0)?)?;
    let minus = probe(model, theta_center.offset(delta_hat.as_slice(), -1.0)?)?;
    let (q_plus, q_minus) = model.q_value_pair(&plus, &minus, theta_center, data)?;
    let half_dq = 0.5 * (q_plus - q_minus);
    ParamVector::new(inv.iter().map(|r| half_dq * r).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FimEstimate {
    pub matrix: DMatrix<f64>,
    pub mode: FimMode,
    pub gradient_source: GradientSource,
    pub n_replicates: usize,
    pub c: f64,
    pub seed: u64,
    /// Elementwise sample variance of the `Ĥ_k` (zero when `N = 1`).
    pub per_sample_variance: DMatrix<f64>,
}

impl FimEstimate {
    /// Monte Carlo standard error of each entry of [`FimEstimate::matrix`].
    pub fn standard_errors(&self) -> DMatrix<f64> {
        let n = self.n_replicates as f64;
        self.per_sample_variance.map(|v| (v / n).sqrt())
    }
}

fn replicate<M: EmModel>(
    model: &M,
    theta_star: &ParamVector,
    template_data: &M::Data,
    config: &SpsaConfig,
    k: usize,
) -> Result<DMatrix<f64>> {
    let d = model.dim();
    let pseudo;
    let data = match config.mode {
        FimMode::Expected => {
            let mut rng = stream::replicate_data(config.seed, k);
            pseudo = model.sample_data(theta_star, template_data.size(), &mut rng)?;
            &pseudo
        }
        FimMode::Observed => template_data,
    };

    let mut rng = stream::replicate_perturbation(config.seed, k);
    let delta = gen_perturbation(config.c, d, &mut rng);
    let plus = probe(model, theta_star.offset(delta.as_slice(), 1.0)?)?;
    let minus = probe(model, theta_star.offset(delta.as_slice(), -1.0)?)?;

    let (s_plus, s_minus) = match config.gradient_source {
        GradientSource::DirectS => (model.s_value(&plus, data)?, model.s_value(&minus, data)?),
        GradientSource::QDifferences => {
            // one Δ̂ shared by both branches
            let delta_hat = gen_perturbation(config.c, d, &mut rng);
            (
                s_hat_from_q(model, &plus, &delta_hat, data)?,
                s_hat_from_q(model, &minus, &delta_hat, data)?,
            )
        }
    };
    Ok(hessian_sample_from_gradients(&s_plus, &s_minus, &delta)?.matrix)
}

/// Monte Carlo information estimate at a converged `theta_star`.
///
/// In expected mode `template_data` only supplies the sample size of the
/// pseudodata; in observed mode it is the fixed dataset. Replicates run on the
/// rayon pool; each draws from its own `(seed, k)` streams and the reduction
/// is a fixed-order pairwise sum, so the result does not depend on threading.
pub fn estimate_fim<M: EmModel>(
    model: &M,
    theta_star: &ParamVector,
    template_data: &M::Data,
    config: &SpsaConfig,
) -> Result<FimEstimate> {
    config.validate()?;
    theta_star.expect_dim(model.dim())?;
    model.validate(theta_star)?;
    if config.gradient_source == GradientSource::DirectS && !model.capabilities().has_s {
        return Err(EmError::Unsupported("s_value"));
    }

    let samples: Vec<DMatrix<f64>> = (0..config.n_replicates)
        .into_par_iter()
        .map(|k| {
            replicate(model, theta_star, template_data, config, k).map_err(|e| e.at_replicate(k))
        })
        .collect::<Result<_>>()?;

    let n = config.n_replicates as f64;
    let sum = pairwise_sum(&samples).expect("N >= 1");
    let mean = &sum / n;
    let per_sample_variance = if samples.len() > 1 {
        let squares: Vec<DMatrix<f64>> = samples
            .iter()
            .map(|h| (h - &mean).map(|v| v * v))
            .collect();
        pairwise_sum(&squares).expect("N >= 2") / (n - 1.0)
    } else {
        DMatrix::zeros(sum.nrows(), sum.ncols())
    };

    Ok(FimEstimate {
        matrix: -(sum / n),
        mode: config.mode,
        gradient_source: config.gradient_source,
        n_replicates: config.n_replicates,
        c: config.c,
        seed: config.seed,
        per_sample_variance,
    })
}
