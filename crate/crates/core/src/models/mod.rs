//! Built-in EM problems.

pub mod gmm;
pub mod kalman;
pub mod ssm;
pub mod synthetic;

pub use gmm::{gmm_alpha, gmm_density, gmm_expected_fim_oracle, GaussianMixture, GmmData, GmmParams};
pub use kalman::{kalman_filter, kalman_smoother, FilterOutput, SmootherOutput};
pub use ssm::{ssm_expected_fim_oracle, ssm_simulate, SsmData, SsmParams, SsmSpec, StateSpaceModel};
pub use synthetic::{SyntheticData, SyntheticQuadratic};
