//! The model abstraction shared by every EM problem and the EM driver.

use std::fmt;
use std::ops::Index;

use nalgebra::DVector;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::baselines::CompleteInfoParts;
use crate::error::{EmError, Result};

/// A point in a model's parameter space. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((coord, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(EmError::InvalidParameter {
                coord,
                value,
                reason: "entry is not finite",
            });
        }
        Ok(ParamVector(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn from_dvector(v: &DVector<f64>) -> Result<Self> {
        Self::new(v.iter().copied().collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim() == dim {
            Ok(())
        } else {
            Err(EmError::DimensionMismatch {
                expected: dim,
                got: self.dim(),
            })
        }
    }

    /// `self + scale * step`, checked for dimension and finiteness.
    pub fn offset(&self, step: &[f64], scale: f64) -> Result<Self> {
        self.expect_dim(step.len())?;
        Self::new(
            self.0
                .iter()
                .zip(step)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    /// Copy with coordinate `i` replaced.
    pub fn with_coord(&self, i: usize, value: f64) -> Result<Self> {
        let mut v = self.0.clone();
        v[i] = value;
        Self::new(v)
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = EmError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ParamVector::new(v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Vec<f64> {
        p.0
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Display for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        write!(f, ")")
    }
}

/// Observed-data container. Implementations are immutable once built.
pub trait Dataset: Send + Sync {
    /// Number of observation units `n`.
    fn size(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub has_s: bool,
    pub has_observed_loglik: bool,
    pub has_complete_info: bool,
}

/// Capability interface for an EM problem.
///
/// `q_value`, `em_map` and `sample_data` are mandatory; the rest are optional and
/// advertised through [`Capabilities`]. All evaluations are pure.
pub trait EmModel: Sync {
    type Data: Dataset;

    fn dim(&self) -> usize;

    /// Coordinate labels used in reports.
    fn param_names(&self) -> Vec<String>;

    fn capabilities(&self) -> Capabilities;

    /// Validity predicate for the parameter domain.
    fn validate(&self, theta: &ParamVector) -> Result<()>;

    /// `Q(θ | θ′) = E[L(θ | X, Y) | Y, θ′]`.
    fn q_value(&self, theta: &ParamVector, theta_cond: &ParamVector, data: &Self::Data) -> Result<f64>;

    /// `(Q(θ_a | θ′), Q(θ_b | θ′))`. Models with a costly E step can share it
    /// between the two evaluations.
    fn q_value_pair(
        &self,
        theta_a: &ParamVector,
        theta_b: &ParamVector,
        theta_cond: &ParamVector,
        data: &Self::Data,
    ) -> Result<(f64, f64)> {
        Ok((
            self.q_value(theta_a, theta_cond, data)?,
            self.q_value(theta_b, theta_cond, data)?,
        ))
    }

    /// `S(θ′ | Y)`: gradient of `Q(· | θ′)` evaluated at `θ′`.
    fn s_value(&self, _theta_cond: &ParamVector, _data: &Self::Data) -> Result<ParamVector> {
        Err(EmError::Unsupported("s_value"))
    }

    /// One full E+M step `M(θ)`.
    fn em_map(&self, theta: &ParamVector, data: &Self::Data) -> Result<ParamVector>;

    /// Draw `n` observation units from the observed-data law at `theta`.
    fn sample_data(&self, theta: &ParamVector, n: usize, rng: &mut dyn RngCore) -> Result<Self::Data>;

    /// `L_O(θ | Y)`.
    fn observed_loglik(&self, _theta: &ParamVector, _data: &Self::Data) -> Result<f64> {
        Err(EmError::Unsupported("observed_loglik"))
    }

    /// Conditional complete-data information pieces needed by Louis and SEM.
    fn complete_info(&self, _theta: &ParamVector, _data: &Self::Data) -> Result<CompleteInfoParts> {
        Err(EmError::Unsupported("complete_info"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub delta: f64,
    pub max_iterations: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            delta: 1e-8,
            max_iterations: 10_000,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(EmError::InvalidConfig(format!(
                "em.delta must be positive, got {}",
                self.delta
            )));
        }
        if self.max_iterations < 1 {
            return Err(EmError::InvalidConfig("em.max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `L_O(θ^(t) | Y)` for `t = 0, 1, ...`.
    ObservedLoglik,
    /// `Q(θ^(t+1) | θ^(t))` for `t = 0, 1, ...`.
    QValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// `θ^(0), θ^(1), ...`; the last entry is the returned estimate.
    pub iterates: Vec<ParamVector>,
    pub objective_kind: Objective,
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EmTrace {
    pub fn theta_star(&self) -> &ParamVector {
        self.iterates.last().expect("trace always holds theta0")
    }
}

/// Iterate `M` from `theta0` until successive objective values differ by less
/// than `config.delta`. Running out of iterations is reported through
/// `converged = false`, not as an error.
pub fn run_em<M: EmModel>(
    model: &M,
    data: &M::Data,
    theta0: &ParamVector,
    config: &EmConfig,
) -> Result<EmTrace> {
    config.validate()?;
    theta0.expect_dim(model.dim())?;
    model.validate(theta0)?;

    let use_loglik = model.capabilities().has_observed_loglik;
    let mut iterates = vec![theta0.clone()];
    let mut objective = Vec::new();
    if use_loglik {
        objective.push(model.observed_loglik(theta0, data)?);
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let current = iterates.last().expect("non-empty");
        let next = model.em_map(current, data)?;
        let value = if use_loglik {
            model.observed_loglik(&next, data)?
        } else {
            model.q_value(&next, current, data)?
        };
        iterates.push(next);
        iterations += 1;
        let previous = objective.last().copied();
        objective.push(value);
        if let Some(prev) = previous {
            if (value - prev).abs() < config.delta {
                converged = true;
                break;
            }
        }
    }

    Ok(EmTrace {
        iterates,
        objective_kind: if use_loglik {
            Objective::ObservedLoglik
        } else {
            Objective::QValue
        },
        objective,
        iterations,
        converged,
    })
}
