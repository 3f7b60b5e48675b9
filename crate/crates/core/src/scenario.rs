//! Scenario files: TOML with nested sections, validated into domain models.
//!
//! ```toml
//! id = "two-atom"
//! seed = 7
//!
//! [mu0]
//! atoms = [1.0, 2.0]
//! weights = [0.5, 0.5]
//!
//! [coefficients]
//! b = [1.0, 2.0]
//! sigma = [1.0, 1.0]
//! sigma0 = [1.0, 2.0]
//! q = 1.5
//!
//! [common_noise]
//! kind = "gauss-hermite"
//! order = 6
//!
//! [idiosyncratic_noise]
//! kind = "two-point"
//!
//! [one_period.kernel]
//! family = "second-arg"
//! c = 0.5
//! ```
//!
//! Continuous-time runs use a `[ct]` section and power-utility runs a
//! `[bsde]` section; see the README for every field.

use serde::Deserialize;
use thiserror::Error;

use crate::bsde::SchemeConfig;
use crate::ctsim::{CoefficientProcess, CtError, CtModel, InitialLaw};
use crate::model::{AtomLaw, HoldingKernel, ModelError, NoiseQuadrature, OnePeriodModel};
use crate::oneperiod::{self, NoiseSampling, OnePeriodError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("scenario has no [{0}] section")]
    MissingSection(&'static str),
    #[error("invalid field {field}: {source}")]
    Model {
        field: &'static str,
        #[source]
        source: ModelError,
    },
    #[error("invalid field {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Ct(#[from] CtError),
    #[error(transparent)]
    OnePeriod(#[from] OnePeriodError),
}

fn model_err(field: &'static str) -> impl Fn(ModelError) -> ScenarioError {
    move |source| ScenarioError::Model { field, source }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    pub mu0: Option<LawSpec>,
    pub coefficients: Option<CoefficientSpec>,
    pub common_noise: Option<NoiseSpec>,
    pub idiosyncratic_noise: Option<NoiseSpec>,
    pub one_period: Option<OnePeriodSpec>,
    pub nplayer: Option<NPlayerSpec>,
    pub ct: Option<CtSpec>,
    pub bsde: Option<BsdeSpec>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    pub atoms: Vec<f64>,
    /// Uniform when omitted.
    pub weights: Option<Vec<f64>>,
}

impl LawSpec {
    fn build(&self, field: &'static str) -> Result<AtomLaw, ScenarioError> {
        match &self.weights {
            Some(w) => AtomLaw::new(self.atoms.clone(), w.clone()),
            None => AtomLaw::uniform(self.atoms.clone()),
        }
        .map_err(model_err(field))
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub q: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    TwoPoint,
    GaussHermite { order: usize },
    Custom { nodes: Vec<f64>, weights: Vec<f64> },
}

impl NoiseSpec {
    pub fn build(&self, field: &'static str) -> Result<NoiseQuadrature, ScenarioError> {
        match self {
            NoiseSpec::TwoPoint => Ok(NoiseQuadrature::two_point()),
            NoiseSpec::GaussHermite { order } => NoiseQuadrature::gauss_hermite(*order).map_err(model_err(field)),
            NoiseSpec::Custom { nodes, weights } => {
                NoiseQuadrature::new(nodes.clone(), weights.clone()).map_err(model_err(field))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OnePeriodSpec {
    pub kernel: KernelSpec,
}

/// Holding kernel families.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelSpec {
    Zero,
    Constant { value: f64 },
    /// Row-major values `π(xᵢ, xⱼ)`.
    Table { values: Vec<Vec<f64>> },
    /// `π(x, x̂) = b(x̂)/E[b] − c`.
    SecondArg { c: f64 },
    /// `π(x, x̂) = ψ(x)(cψ(x̂) + b(x̂)/E[b] − 1)` with `E[ψ] = 1`.
    Separable { psi: Vec<f64>, c: f64 },
}

impl KernelSpec {
    pub fn build(&self, model: &OnePeriodModel) -> Result<HoldingKernel, ScenarioError> {
        let n = model.n_atoms();
        Ok(match self {
            KernelSpec::Zero => HoldingKernel::zeros(n),
            KernelSpec::Constant { value } => HoldingKernel::constant(n, *value),
            KernelSpec::Table { values } => {
                if values.len() != n || values.iter().any(|r| r.len() != n) {
                    return Err(ScenarioError::Invalid {
                        field: "one_period.kernel.values",
                        message: format!("expected a {n}×{n} table"),
                    });
                }
                HoldingKernel::from_fn(n, |i, j| values[i][j])
            }
            KernelSpec::SecondArg { c } => oneperiod::pi_example_second_arg(model, *c)?,
            KernelSpec::Separable { psi, c } => oneperiod::pi_example_separable(model, psi, *c)?,
        })
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NPlayerSpec {
    /// Population sizes of the convergence study; the first is used for a
    /// single run.
    pub n: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default = "default_sampling")]
    pub sampling: NoiseSampling,
    /// Fixed common-noise value; drawn per seed when omitted.
    pub eps0: Option<f64>,
}

fn default_seeds() -> u64 {
    200
}

fn default_sampling() -> NoiseSampling {
    NoiseSampling::Quadrature
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSpec {
    Atoms { atoms: Vec<f64>, weights: Option<Vec<f64>> },
    Lognormal { mu: f64, sd: f64 },
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlSpec {
    /// `α = σ⁰ x`.
    Equilibrium,
    /// `α = a x`.
    Proportional { a: CoefficientProcess },
}

/// Cross-holding kernels used to derive a reduced control:
/// `π(x̂, x) = κ` and `β(x, x̂) = base + amplitude · tanh(x̂ − x)`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CrossHoldingSpec {
    pub kappa: f64,
    pub beta_base: f64,
    pub beta_amplitude: f64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CtSpec {
    pub horizon: f64,
    pub steps: usize,
    pub particles: usize,
    pub lambda: CoefficientProcess,
    pub sigma: CoefficientProcess,
    pub sigma0: CoefficientProcess,
    pub kappa: CoefficientProcess,
    pub x0: InitialSpec,
    pub p: Option<f64>,
    pub control: Option<ControlSpec>,
    pub cross_holding: Option<CrossHoldingSpec>,
    /// Emit the binary path table as well as the CSV.
    #[serde(default)]
    pub binary_paths: bool,
}

impl CtSpec {
    pub fn build(&self) -> Result<CtModel, ScenarioError> {
        if !(self.horizon > 0.0) || self.steps == 0 {
            return Err(ScenarioError::Invalid {
                field: "ct.horizon/ct.steps",
                message: "horizon must be positive and steps nonzero".into(),
            });
        }
        let x0 = match &self.x0 {
            InitialSpec::Atoms { atoms, weights } => InitialLaw::Atoms(
                LawSpec {
                    atoms: atoms.clone(),
                    weights: weights.clone(),
                }
                .build("ct.x0")?,
            ),
            InitialSpec::Lognormal { mu, sd } => InitialLaw::LogNormal { mu: *mu, sd: *sd },
        };
        Ok(CtModel::new(
            CtModel::uniform_grid(self.horizon, self.steps),
            self.lambda.clone(),
            self.sigma.clone(),
            self.sigma0.clone(),
            self.kappa.clone(),
            x0,
            self.p,
        )?)
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.start + self.step * i as f64).collect()
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BsdeSpec {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_z_cap")]
    pub z_cap: f64,
    #[serde(default = "default_y_bound")]
    pub y_bound: f64,
    /// Constant-control grid of the utility grid search.
    pub grid: Option<GridSpec>,
    #[serde(default = "default_grid_paths")]
    pub grid_paths: usize,
}

impl BsdeSpec {
    pub fn scheme(&self) -> SchemeConfig {
        SchemeConfig {
            degree: self.degree,
            z_cap: self.z_cap,
            y_bound: self.y_bound,
        }
    }
}

fn default_paths() -> usize {
    10_000
}
fn default_degree() -> usize {
    crate::bsde::DEFAULT_DEGREE
}
fn default_z_cap() -> f64 {
    crate::bsde::DEFAULT_Z_CAP
}
fn default_y_bound() -> f64 {
    crate::bsde::DEFAULT_Y_BOUND
}
fn default_grid_paths() -> usize {
    100_000
}

impl Scenario {
    /// Parses a scenario; errors carry the line, column and field name.
    pub fn from_toml_str(s: &str) -> Result<Self, ScenarioError> {
        toml::from_str(s).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn one_period_model(&self) -> Result<OnePeriodModel, ScenarioError> {
        let mu0 = self.mu0.as_ref().ok_or(ScenarioError::MissingSection("mu0"))?.build("mu0")?;
        let c = self.coefficients.as_ref().ok_or(ScenarioError::MissingSection("coefficients"))?;
        let rho = self
            .common_noise
            .as_ref()
            .ok_or(ScenarioError::MissingSection("common_noise"))?
            .build("common_noise")?;
        let eps = self
            .idiosyncratic_noise
            .as_ref()
            .unwrap_or(&NoiseSpec::TwoPoint)
            .build("idiosyncratic_noise")?;
        OnePeriodModel::new(mu0, rho, eps, c.b.clone(), c.sigma.clone(), c.sigma0.clone(), c.q)
            .map_err(model_err("coefficients"))
    }

    pub fn kernel(&self, model: &OnePeriodModel) -> Result<HoldingKernel, ScenarioError> {
        self.one_period
            .as_ref()
            .map(|o| &o.kernel)
            .unwrap_or(&KernelSpec::Zero)
            .build(model)
    }

    pub fn ct_spec(&self) -> Result<&CtSpec, ScenarioError> {
        self.ct.as_ref().ok_or(ScenarioError::MissingSection("ct"))
    }

    pub fn ct_model(&self) -> Result<CtModel, ScenarioError> {
        self.ct_spec()?.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_ATOM: &str = r#"
id = "two-atom"
seed = 7

[mu0]
atoms = [1.0, 2.0]

[coefficients]
b = [1.0, 2.0]
sigma = [1.0, 1.0]
sigma0 = [1.0, 2.0]
q = 1.5

[common_noise]
kind = "two-point"

[one_period.kernel]
family = "second-arg"
c = 0.5
"#;

    #[test]
    fn parses_one_period_scenario() {
        let s = Scenario::from_toml_str(TWO_ATOM).unwrap();
        let m = s.one_period_model().unwrap();
        assert_eq!(m.mean_b(), 1.5);
        let k = s.kernel(&m).unwrap();
        assert_eq!(k.size(), 2);
    }

    #[test]
    fn unknown_field_reports_location() {
        let bad = TWO_ATOM.replace("q = 1.5", "q = 1.5\nqq = 2.0");
        let err = Scenario::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("qq") && err.contains("line"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let bad = TWO_ATOM.replace("q = 1.5", "q = -1.0");
        let err = Scenario::from_toml_str(&bad).unwrap().one_period_model().unwrap_err();
        assert!(err.to_string().contains("coefficients"), "{err}");
    }

    #[test]
    fn parses_ct_section() {
        let s = Scenario::from_toml_str(
            r#"
id = "ct"
[ct]
horizon = 1.0
steps = 10
particles = 50
lambda = { kind = "tanh", base = 0.3, amplitude = 0.1 }
sigma = { kind = "constant", value = 0.2 }
sigma0 = { kind = "tanh", base = 0.3, amplitude = 0.1 }
kappa = { kind = "constant", value = 0.5 }
x0 = { kind = "lognormal", mu = 0.0, sd = 0.2 }
control = { kind = "proportional", a = { kind = "constant", value = 0.2 } }
"#,
        )
        .unwrap();
        let m = s.ct_model().unwrap();
        assert_eq!(m.n_times(), 11);
        assert!(!m.is_deterministic());
    }

    #[test]
    fn grid_points_are_inclusive() {
        let g = GridSpec {
            start: 0.0,
            stop: 0.6,
            step: 0.05,
        };
        let p = g.points();
        assert_eq!(p.len(), 13);
        assert!((p[12] - 0.6).abs() < 1e-12);
    }
}
