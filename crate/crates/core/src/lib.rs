//! Fisher information for EM estimates.
//!
//! The Monte Carlo estimator in [`spsa`] perturbs the E-step score (or the
//! `Q` function itself) along random Bernoulli directions and averages the
//! resulting one-sample Hessians. [`baselines`] holds the classical observed
//! information routes used to check it, and [`models`] the built-in problems.

pub mod baselines;
pub mod em;
pub mod experiment;
pub mod error;
pub mod fd;
pub mod linalg;
pub mod models;
pub mod quad;
pub mod spsa;
pub mod stream;

pub use em::{run_em, Capabilities, Dataset, EmConfig, EmModel, EmTrace, Objective, ParamVector};
pub use error::{EmError, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentError, Report, Task};
pub use spsa::{estimate_fim, FimEstimate, FimMode, GradientSource, SpsaConfig};
