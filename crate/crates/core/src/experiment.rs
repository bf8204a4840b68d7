//! Config-driven experiment runner: data, EM fit, information estimates,
//! comparisons and the report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{fd_dm, fd_observed_fim, louis_fim, oakes_fim, sem_dm, sem_fim, spsa_dm, DmEstimate};
use crate::em::{run_em, EmConfig, EmModel, EmTrace, Objective, ParamVector};
use crate::error::{EmError, Result};
use crate::linalg::{eigenvalues, from_rows, inverse, spectral_rel_error, to_rows};
use crate::models::{
    gmm_expected_fim_oracle, ssm_expected_fim_oracle, GaussianMixture, GmmData, GmmParams, SsmData, SsmParams,
    SsmSpec, StateSpaceModel, SyntheticData, SyntheticQuadratic,
};
use crate::quad::QuadOptions;
use crate::spsa::{estimate_fim, FimMode, GradientSource, SpsaConfig};
use crate::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gmm,
    Ssm,
    SyntheticQuadratic,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gmm => "gmm",
            ModelKind::Ssm => "ssm",
            ModelKind::SyntheticQuadratic => "synthetic-quadratic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpsaSection {
    pub c: f64,
    #[serde(rename = "N")]
    pub n_replicates: usize,
    pub mode: FimMode,
    pub gradient_source: GradientSource,
}

impl Default for SpsaSection {
    fn default() -> Self {
        let d = SpsaConfig::default();
        SpsaSection {
            c: d.c,
            n_replicates: d.n_replicates,
            mode: d.mode,
            gradient_source: d.gradient_source,
        }
    }
}

impl SpsaSection {
    pub fn to_config(self, seed: u64, mode: FimMode) -> SpsaConfig {
        SpsaConfig {
            c: self.c,
            n_replicates: self.n_replicates,
            seed,
            mode,
            gradient_source: self.gradient_source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub louis: bool,
    pub oakes: bool,
    pub sem: bool,
    pub fd_observed: bool,
    pub spsa_dm: bool,
    pub fd_dm: bool,
    /// Relative finite-difference step for Oakes, the FD Hessian and the FD Jacobian.
    pub fd_step: f64,
    /// SEM stability tolerance; `√δ` when absent.
    pub sem_tolerance: Option<f64>,
    pub dm_samples: usize,
    /// Perturbation size for SPSA-DM; `spsa.c` when absent.
    pub dm_c: Option<f64>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            louis: true,
            oakes: true,
            sem: true,
            fd_observed: true,
            spsa_dm: true,
            fd_dm: true,
            fd_step: 1e-4,
            sem_tolerance: None,
            dm_samples: 50,
            dm_c: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    #[default]
    None,
    Oracle,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// The reference is an information matrix `I(θ*)`.
    #[default]
    Fim,
    /// The reference is `(I(θ*) / n)⁻¹`.
    InverseScaled,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSection {
    pub source: ReferenceSource,
    pub kind: ReferenceKind,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub h: Vec<Vec<f64>>,
    /// Missing-information curvature; the identity when absent.
    #[serde(default)]
    pub k: Option<Vec<Vec<f64>>>,
    /// Set to false to force the `Q`-difference path.
    #[serde(default = "yes")]
    pub has_s: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// EM start; may be omitted when `theta_star` is given.
    #[serde(default)]
    pub theta0: Vec<f64>,
    /// Parameter used to simulate the observed data; model default when absent.
    #[serde(default)]
    pub theta_true: Option<Vec<f64>>,
    /// Skip EM and evaluate everything at this point.
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
    /// Observed data file; simulated from `theta_true` when absent.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub spsa: SpsaSection,
    #[serde(default)]
    pub baselines: BaselineSection,
    #[serde(default)]
    pub reference: ReferenceSection,
    /// State-space matrices; the three-state benchmark when absent.
    #[serde(default)]
    pub ssm: Option<SsmSpec>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| EmError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| EmError::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(EmError::InvalidConfig("n must be >= 1".into()));
        }
        self.em.validate()?;
        if self.theta0.is_empty() && self.theta_star.is_none() {
            return Err(EmError::InvalidConfig("theta0 is required unless theta_star is given".into()));
        }
        self.spsa.to_config(self.seed, self.spsa.mode).validate()?;
        if !(self.baselines.fd_step > 0.0 && self.baselines.fd_step.is_finite()) {
            return Err(EmError::InvalidConfig("baselines.fd_step must be positive".into()));
        }
        if self.baselines.dm_samples < 1 {
            return Err(EmError::InvalidConfig("baselines.dm_samples must be >= 1".into()));
        }
        if let Some(tol) = self.baselines.sem_tolerance {
            if !(tol > 0.0) {
                return Err(EmError::InvalidConfig("baselines.sem_tolerance must be positive".into()));
            }
        }
        if let Some(c) = self.baselines.dm_c {
            if !(c > 0.0 && c.is_finite()) {
                return Err(EmError::InvalidConfig("baselines.dm_c must be positive".into()));
            }
        }
        if self.reference.source == ReferenceSource::File {
            let Some(path) = &self.reference.path else {
                return Err(EmError::InvalidConfig("reference.source = \"file\" needs reference.path".into()));
            };
            if !self.resolve(path).is_file() {
                return Err(EmError::InvalidConfig(format!("reference file {} not found", path.display())));
            }
        }
        if let Some(path) = &self.data {
            if !self.resolve(path).is_file() {
                return Err(EmError::InvalidConfig(format!("data file {} not found", path.display())));
            }
        }
        if self.model != ModelKind::Ssm && self.ssm.is_some() {
            return Err(EmError::InvalidConfig("[ssm] section given for a non-ssm model".into()));
        }
        if (self.model == ModelKind::SyntheticQuadratic) != self.synthetic.is_some() {
            return Err(EmError::InvalidConfig(
                "[synthetic] section is required for, and only for, model = \"synthetic-quadratic\"".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimMethod {
    Spsa,
    Louis,
    Oakes,
    Sem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmChoice {
    Sem,
    Spsa,
    Fd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum Task {
    Fit,
    Fim { mode: FimMode, method: FimMethod },
    Dm { method: DmChoice },
    Compare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Fim,
    InverseScaled,
    Dm,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub name: String,
    pub kind: MatrixKind,
    pub values: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<Vec<Vec<f64>>>,
}

impl MatrixReport {
    fn new(name: &str, kind: MatrixKind, m: &DMatrix<f64>) -> Self {
        MatrixReport {
            name: name.to_string(),
            kind,
            values: to_rows(m),
            eigenvalues: eigenvalues(m),
            standard_errors: None,
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        from_rows(&self.values).expect("report matrices are rectangular")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `‖a − b‖₂ / ‖b‖₂`.
    SpectralRelative,
    /// `max |a_ij − b_ij|`.
    MaxAbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub estimate: String,
    pub reference: String,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmSummary {
    pub iterations: usize,
    pub converged: bool,
    pub objective: Objective,
    pub final_objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_inf_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: ModelKind,
    pub task: Task,
    pub param_names: Vec<String>,
    pub n: usize,
    pub seed: u64,
    pub theta_star: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<EmSummary>,
    pub matrices: Vec<MatrixReport>,
    pub errors: Vec<ErrorEntry>,
    pub notes: Vec<String>,
    pub config: ExperimentConfig,
}

impl Report {
    pub fn matrix(&self, name: &str) -> Option<&MatrixReport> {
        self.matrices.iter().find(|m| m.name == name)
    }

    pub fn error(&self, estimate: &str, reference: &str) -> Option<f64> {
        self.errors
            .iter()
            .find(|e| e.estimate == estimate && e.reference == reference)
            .map(|e| e.value)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())
            .map_err(|e| EmError::InvalidConfig(format!("cannot write {}: {e}", path.display())))
    }

    /// Human-readable summary with every number at 4 decimals.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model {}  n = {}  seed = {}", self.model.as_str(), self.n, self.seed);
        let theta: Vec<String> = self.theta_star.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "theta* ({}) = ({})", self.param_names.join(", "), theta.join(", "));
        if let Some(em) = &self.em {
            let _ = writeln!(
                out,
                "EM: {} iterations, {}, final objective {:.4}",
                em.iterations,
                if em.converged { "converged" } else { "not converged" },
                em.final_objective
            );
        }
        for m in &self.matrices {
            out.push('\n');
            out.push_str(&format_matrix(&m.name, &self.param_names, &m.values));
            let eig: Vec<String> = m.eigenvalues.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(out, "eigenvalues: {}", eig.join("  "));
        }
        if !self.errors.is_empty() {
            out.push('\n');
            let w1 = self.errors.iter().map(|e| e.estimate.len()).max().unwrap_or(0).max(8);
            let w2 = self.errors.iter().map(|e| e.reference.len()).max().unwrap_or(0).max(9);
            let _ = writeln!(out, "{:<w1$}  {:<w2$}  {:<17}  error", "estimate", "reference", "metric");
            for e in &self.errors {
                let metric = match e.metric {
                    Metric::SpectralRelative => "spectral_relative",
                    Metric::MaxAbs => "max_abs",
                };
                let _ = writeln!(out, "{:<w1$}  {:<w2$}  {:<17}  {:.4}", e.estimate, e.reference, metric, e.value);
            }
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}

/// Row-major, right-aligned, with coordinate names on both axes.
pub fn format_matrix(title: &str, names: &[String], rows: &[Vec<f64>]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| r.iter().map(|v| format!("{v:.4}")).collect())
        .collect();
    let width = cells
        .iter()
        .flatten()
        .map(String::len)
        .chain(names.iter().map(String::len))
        .max()
        .unwrap_or(6);
    let label = names.iter().map(String::len).max().unwrap_or(0);
    let mut out = format!("{title}\n{:label$}", "");
    for name in names {
        let _ = write!(out, "  {name:>width$}");
    }
    out.push('\n');
    for (name, row) in names.iter().zip(&cells) {
        let _ = write!(out, "{name:<label$}");
        for c in row {
            let _ = write!(out, "  {c:>width$}");
        }
        out.push('\n');
    }
    out
}

/// Whitespace-separated rows; blank lines and `#` comments skipped.
pub fn parse_matrix_text(text: &str) -> Result<DMatrix<f64>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| EmError::InvalidData(format!("`{t}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    from_rows(&rows)
}

/// `(I / n)⁻¹`, the asymptotic covariance scaled back to one observation unit.
pub fn inverse_scaled(info: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    inverse(&(info / n as f64), "information matrix")
}

/// A failure with the pipeline stage that produced it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct ExperimentError {
    pub stage: &'static str,
    #[source]
    pub source: EmError,
}

impl ExperimentError {
    /// 2 configuration error, 3 numerical failure, 4 non-convergence.
    pub fn exit_code(&self) -> i32 {
        match (&self.stage, &self.source) {
            (_, EmError::NotConverged { .. }) => 4,
            (&"config" | &"data", _) => 2,
            (_, EmError::InvalidConfig(_) | EmError::Unsupported(_)) => 2,
            _ => 3,
        }
    }
}

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, ExperimentError>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, ExperimentError> {
        self.map_err(|source| ExperimentError { stage, source })
    }
}

/// Data types that can be read from the plain-text data files.
trait TextData: Sized {
    fn parse_text(text: &str) -> Result<Self>;
}

impl TextData for GmmData {
    fn parse_text(text: &str) -> Result<Self> {
        GmmData::parse(text)
    }
}

impl TextData for SsmData {
    fn parse_text(text: &str) -> Result<Self> {
        SsmData::parse(text)
    }
}

impl TextData for SyntheticData {
    fn parse_text(text: &str) -> Result<Self> {
        SyntheticData::parse(text)
    }
}

type Oracle<'a> = Box<dyn Fn(&ParamVector, usize) -> Result<DMatrix<f64>> + 'a>;

pub fn run_experiment(config: &ExperimentConfig, task: Task) -> std::result::Result<Report, ExperimentError> {
    config.validate().stage("config")?;
    match config.model {
        ModelKind::Gmm => {
            let oracle: Oracle = Box::new(|theta, n| {
                gmm_expected_fim_oracle(&GmmParams::from_param(theta)?, n, &QuadOptions::default())
            });
            run_model(&GaussianMixture, config, task, &[2.0 / 3.0, 3.0, 0.0], oracle)
        }
        ModelKind::Ssm => {
            let spec = config.ssm.clone().unwrap_or_else(SsmSpec::benchmark);
            let p = spec.state_dim();
            let model = StateSpaceModel::new(spec.clone());
            let oracle: Oracle = Box::new(move |theta, n| {
                ssm_expected_fim_oracle(&spec, &SsmParams::new(theta.as_slice().to_vec())?, n)
            });
            run_model(&model, config, task, &vec![1.0; p], oracle)
        }
        ModelKind::SyntheticQuadratic => {
            let section = config.synthetic.as_ref().expect("validated");
            let h = from_rows(&section.h).stage("config")?;
            let k = match &section.k {
                Some(rows) => from_rows(rows).stage("config")?,
                None => DMatrix::identity(h.nrows(), h.ncols()),
            };
            let mut model = SyntheticQuadratic::new(h.clone(), k).stage("config")?;
            if !section.has_s {
                model = model.without_s();
            }
            let d = h.nrows();
            let oracle: Oracle = Box::new(move |_, _| Ok(h.clone()));
            run_model(&model, config, task, &vec![0.0; d], oracle)
        }
    }
}

fn param(values: &[f64], dim: usize, what: &str) -> Result<ParamVector> {
    let p = ParamVector::from_slice(values)?;
    if p.dim() != dim {
        return Err(EmError::InvalidConfig(format!(
            "{what} has {} entries, model dimension is {dim}",
            p.dim()
        )));
    }
    Ok(p)
}

struct Collector {
    matrices: Vec<MatrixReport>,
    errors: Vec<ErrorEntry>,
    notes: Vec<String>,
    n: usize,
}

impl Collector {
    fn fim(&mut self, name: &str, m: &DMatrix<f64>) {
        self.matrices.push(MatrixReport::new(name, MatrixKind::Fim, m));
        match inverse_scaled(m, self.n) {
            Ok(inv) => self.matrices.push(MatrixReport::new(&inv_name(name), MatrixKind::InverseScaled, &inv)),
            Err(_) => self.notes.push(format!("{name} is singular; no inverse reported")),
        }
    }

    fn dm(&mut self, name: &str, dm: &DmEstimate) {
        self.matrices.push(MatrixReport::new(name, MatrixKind::Dm, &dm.matrix));
    }

    fn get(&self, name: &str) -> Option<DMatrix<f64>> {
        self.matrices.iter().find(|m| m.name == name).map(MatrixReport::matrix)
    }

    fn compare(&mut self, estimate: &str, reference: &str, metric: Metric) {
        let (Some(a), Some(b)) = (self.get(estimate), self.get(reference)) else {
            return;
        };
        let value = match metric {
            Metric::SpectralRelative => match spectral_rel_error(&a, &b) {
                Ok(v) => v,
                Err(e) => {
                    self.notes.push(format!("{estimate} vs {reference}: {e}"));
                    return;
                }
            },
            Metric::MaxAbs => (a - b).amax(),
        };
        self.errors.push(ErrorEntry {
            estimate: estimate.to_string(),
            reference: reference.to_string(),
            metric,
            value,
        });
    }
}

fn inv_name(name: &str) -> String {
    format!("{name}_inv_scaled")
}

fn run_model<M>(
    model: &M,
    config: &ExperimentConfig,
    task: Task,
    default_truth: &[f64],
    oracle: Oracle<'_>,
) -> std::result::Result<Report, ExperimentError>
where
    M: EmModel,
    M::Data: TextData,
{
    let d = model.dim();
    let truth = param(config.theta_true.as_deref().unwrap_or(default_truth), d, "theta_true").stage("config")?;
    let override_star = match &config.theta_star {
        Some(v) => Some(param(v, d, "theta_star").stage("config")?),
        None => None,
    };

    let data = match &config.data {
        Some(path) => {
            let path = config.resolve(path);
            let text = fs::read_to_string(&path)
                .map_err(|e| EmError::InvalidConfig(format!("cannot read {}: {e}", path.display())))
                .stage("data")?;
            let data = M::Data::parse_text(&text).stage("data")?;
            if crate::em::Dataset::size(&data) != config.n {
                return Err(EmError::InvalidConfig(format!(
                    "data file holds {} units but n = {}",
                    crate::em::Dataset::size(&data),
                    config.n
                )))
                .stage("data");
            }
            data
        }
        None => model
            .sample_data(&truth, config.n, &mut stream::observed_data(config.seed))
            .stage("data")?,
    };

    let mut notes = Vec::new();
    let (theta_star, trace): (ParamVector, Option<EmTrace>) = match override_star {
        Some(star) => {
            model.validate(&star).stage("config")?;
            notes.push("theta* taken from the configuration; EM not run".to_string());
            (star, None)
        }
        None => {
            let theta0 = param(&config.theta0, d, "theta0").stage("config")?;
            model.validate(&theta0).stage("config")?;
            let trace = run_em(model, &data, &theta0, &config.em).stage("em")?;
            if !trace.converged {
                return Err(EmError::NotConverged {
                    iterations: trace.iterations,
                })
                .stage("em");
            }
            (trace.theta_star().clone(), Some(trace))
        }
    };

    let em = trace.as_ref().map(|t| EmSummary {
        iterations: t.iterations,
        converged: t.converged,
        objective: t.objective_kind,
        final_objective: *t.objective.last().unwrap_or(&f64::NAN),
        score_inf_norm: model.s_value(&theta_star, &data).ok().map(|s| s.norm_inf()),
    });

    let mut out = Collector {
        matrices: Vec::new(),
        errors: Vec::new(),
        notes,
        n: config.n,
    };
    let caps = model.capabilities();
    let b = &config.baselines;

    let spsa = |mode: FimMode, out: &mut Collector| -> std::result::Result<(), ExperimentError> {
        let cfg = config.spsa.to_config(config.seed, mode);
        let est = estimate_fim(model, &theta_star, &data, &cfg).stage("spsa")?;
        let name = match mode {
            FimMode::Expected => "spsa_expected",
            FimMode::Observed => "spsa_observed",
        };
        out.fim(name, &est.matrix);
        let se = to_rows(&est.standard_errors());
        if let Some(m) = out.matrices.iter_mut().find(|m| m.name == name) {
            m.standard_errors = Some(se);
        }
        Ok(())
    };
    let sem_estimate = || -> std::result::Result<DmEstimate, ExperimentError> {
        let Some(trace) = &trace else {
            return Err(EmError::InvalidConfig("SEM needs an EM trace; remove theta_star".into())).stage("sem");
        };
        let tol = b.sem_tolerance.unwrap_or_else(|| config.em.delta.sqrt());
        sem_dm(model, &data, trace, &theta_star, tol).stage("sem")
    };
    let spsa_dm_estimate = || {
        let c = b.dm_c.unwrap_or(config.spsa.c);
        spsa_dm(model, &data, &theta_star, c, b.dm_samples, &mut stream::dm_perturbation(config.seed)).stage("dm")
    };

    let reference = |out: &mut Collector| -> std::result::Result<(), ExperimentError> {
        let m = match config.reference.source {
            ReferenceSource::None => return Ok(()),
            ReferenceSource::Oracle => {
                let fim = oracle(&theta_star, config.n).stage("reference")?;
                match config.reference.kind {
                    ReferenceKind::Fim => fim,
                    ReferenceKind::InverseScaled => inverse_scaled(&fim, config.n).stage("reference")?,
                }
            }
            ReferenceSource::File => {
                let path = config.resolve(config.reference.path.as_ref().expect("validated"));
                let text = fs::read_to_string(&path)
                    .map_err(|e| EmError::InvalidConfig(format!("cannot read {}: {e}", path.display())))
                    .stage("reference")?;
                parse_matrix_text(&text).stage("reference")?
            }
        };
        if m.shape() != (d, d) {
            return Err(EmError::InvalidConfig(format!("reference matrix must be {d} x {d}"))).stage("reference");
        }
        out.matrices.push(MatrixReport::new("reference", MatrixKind::Reference, &m));
        Ok(())
    };
    let compare_to_reference = |out: &mut Collector, names: &[&str]| {
        for name in names {
            match config.reference.kind {
                ReferenceKind::Fim => out.compare(name, "reference", Metric::SpectralRelative),
                ReferenceKind::InverseScaled => out.compare(&inv_name(name), "reference", Metric::SpectralRelative),
            }
        }
    };

    match task {
        Task::Fit => {}
        Task::Fim { mode, method } => {
            if method != FimMethod::Spsa && mode == FimMode::Expected {
                return Err(EmError::InvalidConfig(format!(
                    "{method:?} gives the observed information only; use --mode observed"
                )))
                .stage("config");
            }
            let name = match method {
                FimMethod::Spsa => {
                    spsa(mode, &mut out)?;
                    if mode == FimMode::Expected {
                        "spsa_expected"
                    } else {
                        "spsa_observed"
                    }
                }
                FimMethod::Louis => {
                    out.fim("louis", &louis_fim(model, &theta_star, &data).stage("louis")?);
                    "louis"
                }
                FimMethod::Oakes => {
                    out.fim("oakes", &oakes_fim(model, &theta_star, &data, b.fd_step).stage("oakes")?);
                    "oakes"
                }
                FimMethod::Sem => {
                    let dm = sem_estimate()?;
                    out.dm("dm_sem", &dm);
                    out.fim("sem", &sem_fim(model, &dm, &theta_star, &data).stage("sem")?);
                    "sem"
                }
            };
            reference(&mut out)?;
            compare_to_reference(&mut out, &[name]);
        }
        Task::Dm { method } => {
            let dm = match method {
                DmChoice::Sem => sem_estimate()?,
                DmChoice::Spsa => spsa_dm_estimate()?,
                DmChoice::Fd => fd_dm(model, &data, &theta_star, b.fd_step).stage("dm")?,
            };
            let name = match method {
                DmChoice::Sem => "dm_sem",
                DmChoice::Spsa => "dm_spsa",
                DmChoice::Fd => "dm_fd",
            };
            out.dm(name, &dm);
            if method != DmChoice::Fd {
                out.dm("dm_fd", &fd_dm(model, &data, &theta_star, b.fd_step).stage("dm")?);
                out.compare(name, "dm_fd", Metric::MaxAbs);
            }
        }
        Task::Compare => {
            spsa(FimMode::Expected, &mut out)?;
            spsa(FimMode::Observed, &mut out)?;
            let mut observed = vec!["spsa_observed"];
            if b.louis {
                if caps.has_complete_info {
                    out.fim("louis", &louis_fim(model, &theta_star, &data).stage("louis")?);
                    observed.push("louis");
                } else {
                    out.notes.push("louis skipped: model has no complete-data information".into());
                }
            }
            if b.oakes {
                out.fim("oakes", &oakes_fim(model, &theta_star, &data, b.fd_step).stage("oakes")?);
                observed.push("oakes");
            }
            if b.fd_observed && caps.has_observed_loglik {
                out.fim("fd_observed", &fd_observed_fim(model, &theta_star, &data, b.fd_step).stage("fd")?);
                observed.push("fd_observed");
            }
            let want_sem = b.sem && caps.has_complete_info;
            if b.sem && !caps.has_complete_info {
                out.notes.push("sem skipped: model has no complete-data information".into());
            }
            if want_sem && trace.is_none() {
                out.notes.push("sem skipped: EM not run".into());
            }
            if want_sem && trace.is_some() {
                let dm = sem_estimate()?;
                out.dm("dm_sem", &dm);
                out.fim("sem", &sem_fim(model, &dm, &theta_star, &data).stage("sem")?);
                observed.push("sem");
            }
            if b.spsa_dm {
                out.dm("dm_spsa", &spsa_dm_estimate()?);
            }
            if b.fd_dm {
                out.dm("dm_fd", &fd_dm(model, &data, &theta_star, b.fd_step).stage("dm")?);
                out.compare("dm_sem", "dm_fd", Metric::MaxAbs);
                out.compare("dm_spsa", "dm_fd", Metric::MaxAbs);
            }

            // each observed estimate against every one listed before it
            let anchors = ["louis", "fd_observed", "oakes", "sem", "spsa_observed"];
            let present: Vec<&str> = anchors.iter().copied().filter(|a| observed.contains(a)).collect();
            for (i, est) in present.iter().enumerate().rev() {
                for reference in &present[..i] {
                    out.compare(est, reference, Metric::SpectralRelative);
                }
            }
            if let Some(e) = out.errors.iter().find(|e| e.estimate == "sem" && e.reference == "louis") {
                if e.value > 0.02 {
                    let msg = format!("sem and louis disagree (relative error {:.4})", e.value);
                    out.notes.push(msg);
                }
            }
            reference(&mut out)?;
            let mut all = vec!["spsa_expected"];
            all.extend(present.iter().copied());
            compare_to_reference(&mut out, &all);
        }
    }

    Ok(Report {
        model: config.model,
        task,
        param_names: model.param_names(),
        n: config.n,
        seed: config.seed,
        theta_star: theta_star.as_slice().to_vec(),
        em,
        matrices: out.matrices,
        errors: out.errors,
        notes: out.notes,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
model = "synthetic-quadratic"
n = 20
seed = 3
theta0 = [0.0, 0.0]

[synthetic]
h = [[2.0, 1.0], [1.0, 3.0]]

[spsa]
N = 200
"#;

    #[test]
    fn parse_defaults() {
        let cfg = ExperimentConfig::from_toml_str(SYNTH).unwrap();
        assert_eq!(cfg.em, EmConfig::default());
        assert_eq!(cfg.spsa.n_replicates, 200);
        assert_eq!(cfg.spsa.c, 0.01);
        assert_eq!(cfg.reference.source, ReferenceSource::None);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{SYNTH}\n[em]\ntolerance = 1.0\n");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(EmError::InvalidConfig(_))));
    }

    #[test]
    fn wrong_theta_length_is_a_config_error() {
        let mut cfg = ExperimentConfig::from_toml_str(SYNTH).unwrap();
        cfg.theta0 = vec![0.0];
        let err = run_experiment(&cfg, Task::Fit).unwrap_err();
        assert_eq!(err.stage, "config");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn non_convergence_exit_code() {
        let mut cfg = ExperimentConfig::from_toml_str(SYNTH).unwrap();
        cfg.em.max_iterations = 1;
        cfg.em.delta = 1e-300;
        let err = run_experiment(&cfg, Task::Fit).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn expected_mode_needs_spsa() {
        let cfg = ExperimentConfig::from_toml_str(SYNTH).unwrap();
        let task = Task::Fim {
            mode: FimMode::Expected,
            method: FimMethod::Louis,
        };
        assert_eq!(run_experiment(&cfg, task).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn synthetic_compare_runs_every_route() {
        let cfg = ExperimentConfig::from_toml_str(SYNTH).unwrap();
        let report = run_experiment(&cfg, Task::Compare).unwrap();
        for name in ["spsa_expected", "spsa_observed", "louis", "oakes", "fd_observed", "sem", "dm_sem", "dm_spsa", "dm_fd"] {
            assert!(report.matrix(name).is_some(), "{name} missing");
        }
        assert!(report.error("oakes", "louis").unwrap() < 1e-6);
        assert!(report.error("sem", "louis").unwrap() < 1e-6);
        let summary = report.summary();
        assert!(summary.contains("theta* (theta1, theta2)"));
        assert!(summary.contains("spsa_observed"));
    }

    #[test]
    fn matrix_text_parsing() {
        let m = parse_matrix_text("# ref\n1 2\n3 4\n").unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(parse_matrix_text("1 2\n3\n").is_err());
    }

    #[test]
    fn format_matrix_aligns_columns() {
        let names = vec!["a".to_string(), "b".to_string()];
        let text = format_matrix("m", &names, &[vec![1.0, -22.5], vec![0.25, 3.0]]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[2].len(), lines[3].len());
        assert!(lines[2].contains("-22.5000"));
    }
}
