//! Continuous-time Black–Scholes family: particle simulation under one
//! shared common-noise path, the no-increasing-profit estimator and the
//! reduced-control correspondence.
//!
//! The conditional law of the population given `W⁰` is represented by the
//! cross-section of particles driven by the same common-noise path, so
//! conditional expectations become cross-sectional averages.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{AtomLaw, ModelError};
use crate::rng;
use crate::stats;

/// Truncation of the NIP estimator: `|Σ⁰| ≥ c`.
pub const NIP_C: f64 = 1e-6;
/// Truncation of the NIP estimator: `B² + (Σ⁰)² ≤ N`.
pub const NIP_N: f64 = 1e12;
/// Relative threshold of the NIP verdict.
pub const TOL_NIP_REL: f64 = 1e-6;
/// Tolerance of the identities checked on reconstructed holdings.
pub const TOL_IDENTITY: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("time grid must start at 0, be strictly increasing and have at least two points")]
    InvalidGrid,
    #[error("coefficient table {name} has {got} entries, expected {expected}")]
    TableLength { name: &'static str, got: usize, expected: usize },
    #[error("coefficient {name} = {value} at t = {time} violates {requirement}")]
    InvalidCoefficient {
        name: &'static str,
        time: f64,
        value: f64,
        requirement: &'static str,
    },
    #[error("initial states must be positive")]
    NonPositiveInitial,
    #[error("at least {min} particles are required, got {got}")]
    TooFewParticles { min: usize, got: usize },
    #[error("simulation blew up at t = {time} (particle {particle})")]
    BlowUp { time: f64, particle: usize },
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("observation arrays have shape {got:?}, expected {expected:?}")]
    Shape { got: (usize, usize), expected: (usize, usize) },
    #[error("multiplier vanishes: 1 + mean holding = {0}")]
    InadmissibleMultiplier(f64),
    #[error("mean absolute common volatility vanishes")]
    DegenerateVolatility,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("identity check failed: {what} off by {error}")]
    IdentityCheck { what: &'static str, error: f64 },
}

/// A scalar process adapted to the common noise, evaluated at grid index
/// `k` from the level `W⁰_{t_k}` only.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientProcess {
    Constant { value: f64 },
    /// One value per grid time.
    Table { values: Vec<f64> },
    /// `base + slope · t`.
    Linear { base: f64, slope: f64 },
    /// `base + slope · W⁰_t`.
    Affine { base: f64, slope: f64 },
    /// `base + amplitude · tanh(W⁰_t)`.
    Tanh { base: f64, amplitude: f64 },
}

impl CoefficientProcess {
    pub fn constant(value: f64) -> Self {
        CoefficientProcess::Constant { value }
    }

    pub fn eval(&self, k: usize, t: f64, w0: f64) -> f64 {
        match self {
            CoefficientProcess::Constant { value } => *value,
            CoefficientProcess::Table { values } => values[k],
            CoefficientProcess::Linear { base, slope } => base + slope * t,
            CoefficientProcess::Affine { base, slope } => base + slope * w0,
            CoefficientProcess::Tanh { base, amplitude } => base + amplitude * w0.tanh(),
        }
    }

    /// True when the process does not depend on the common noise.
    pub fn is_deterministic(&self) -> bool {
        match self {
            CoefficientProcess::Constant { .. }
            | CoefficientProcess::Table { .. }
            | CoefficientProcess::Linear { .. } => true,
            CoefficientProcess::Affine { slope, .. } => *slope == 0.0,
            CoefficientProcess::Tanh { amplitude, .. } => *amplitude == 0.0,
        }
    }

    /// Bounds of the process over all common-noise levels, when finite.
    fn range(&self) -> Option<(f64, f64)> {
        match self {
            CoefficientProcess::Constant { value } => Some((*value, *value)),
            CoefficientProcess::Table { values } => Some((
                values.iter().cloned().fold(f64::INFINITY, f64::min),
                values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )),
            CoefficientProcess::Linear { .. } => None,
            CoefficientProcess::Affine { base, slope } if *slope == 0.0 => Some((*base, *base)),
            CoefficientProcess::Affine { .. } => None,
            CoefficientProcess::Tanh { base, amplitude } => {
                Some((base - amplitude.abs(), base + amplitude.abs()))
            }
        }
    }
}

/// Law of the initial states.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Atoms(AtomLaw),
    /// `X₀ = exp(mu + sd · N(0, 1))`.
    LogNormal { mu: f64, sd: f64 },
}

impl InitialLaw {
    /// Draws one initial state.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            InitialLaw::Atoms(law) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (x, w) in law.atoms().iter().zip(law.weights()) {
                    acc += w;
                    if u < acc {
                        return *x;
                    }
                }
                *law.atoms().last().expect("nonempty law")
            }
            InitialLaw::LogNormal { mu, sd } => {
                let g: f64 = rng.sample(StandardNormal);
                (mu + sd * g).exp()
            }
        }
    }
}

/// Time grid plus the coefficient processes `λ, σ, σ⁰, κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtModel {
    pub t_grid: Vec<f64>,
    pub lambda: CoefficientProcess,
    pub sigma: CoefficientProcess,
    pub sigma0: CoefficientProcess,
    pub kappa: CoefficientProcess,
    pub x0: InitialLaw,
    /// Power-utility exponent in `(0, 1)`.
    pub p: Option<f64>,
}

/// Coefficient values at one grid time on one common-noise path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub lambda: f64,
    pub sigma: f64,
    pub sigma0: f64,
    pub kappa: f64,
}

impl Coefficients {
    /// Idiosyncratic volatility of the reduced dynamics, `σ/(1 + κ)`.
    pub fn v(&self) -> f64 {
        self.sigma / (1.0 + self.kappa)
    }
}

impl CtModel {
    pub fn new(
        t_grid: Vec<f64>,
        lambda: CoefficientProcess,
        sigma: CoefficientProcess,
        sigma0: CoefficientProcess,
        kappa: CoefficientProcess,
        x0: InitialLaw,
        p: Option<f64>,
    ) -> Result<Self, CtError> {
        let m = Self {
            t_grid,
            lambda,
            sigma,
            sigma0,
            kappa,
            x0,
            p,
        };
        m.validate()?;
        Ok(m)
    }

    /// Uniform grid on `[0, horizon]` with `steps` steps.
    pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
        (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect()
    }

    fn validate(&self) -> Result<(), CtError> {
        let g = &self.t_grid;
        if g.len() < 2 || g[0] != 0.0 || g.windows(2).any(|w| w[1] <= w[0]) || g.iter().any(|t| !t.is_finite()) {
            return Err(CtError::InvalidGrid);
        }
        for (name, c) in self.processes() {
            if let CoefficientProcess::Table { values } = c {
                if values.len() != g.len() {
                    return Err(CtError::TableLength {
                        name,
                        got: values.len(),
                        expected: g.len(),
                    });
                }
            }
        }
        // Deterministic bounds are checked here; noise-driven processes are
        // checked pathwise during simulation.
        for k in 0..g.len() {
            let t = g[k];
            for (name, c) in self.processes() {
                let bounds = if c.is_deterministic() {
                    let v = c.eval(k, t, 0.0);
                    Some((v, v))
                } else {
                    c.range()
                };
                if let Some((lo, hi)) = bounds {
                    self.check_value(name, t, lo)?;
                    self.check_value(name, t, hi)?;
                }
            }
        }
        if let Some(p) = self.p {
            if !(p > 0.0 && p < 1.0) {
                return Err(CtError::InvalidCoefficient {
                    name: "p",
                    time: 0.0,
                    value: p,
                    requirement: "0 < p < 1",
                });
            }
        }
        match &self.x0 {
            InitialLaw::Atoms(law) if law.atoms()[0] <= 0.0 => Err(CtError::NonPositiveInitial),
            InitialLaw::LogNormal { mu, sd } if !mu.is_finite() || !sd.is_finite() || *sd < 0.0 => {
                Err(CtError::NonPositiveInitial)
            }
            _ => Ok(()),
        }
    }

    fn processes(&self) -> [(&'static str, &CoefficientProcess); 4] {
        [
            ("lambda", &self.lambda),
            ("sigma", &self.sigma),
            ("sigma0", &self.sigma0),
            ("kappa", &self.kappa),
        ]
    }

    fn check_value(&self, name: &'static str, time: f64, value: f64) -> Result<(), CtError> {
        let (ok, requirement) = match name {
            "sigma" => (value >= 0.0, "sigma >= 0"),
            "sigma0" => (value > 0.0, "sigma0 > 0"),
            "kappa" => (1.0 + value > 0.0, "1 + kappa > 0"),
            _ => (true, ""),
        };
        if !value.is_finite() || !ok {
            return Err(CtError::InvalidCoefficient {
                name,
                time,
                value,
                requirement: if value.is_finite() { requirement } else { "finiteness" },
            });
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        *self.t_grid.last().expect("validated grid")
    }

    pub fn n_times(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_deterministic(&self) -> bool {
        self.processes().iter().all(|(_, c)| c.is_deterministic())
    }

    /// Coefficients at grid index `k` on a path with `W⁰_{t_k} = w0`.
    pub fn coefficients(&self, k: usize, w0: f64) -> Coefficients {
        let t = self.t_grid[k];
        Coefficients {
            lambda: self.lambda.eval(k, t, w0),
            sigma: self.sigma.eval(k, t, w0),
            sigma0: self.sigma0.eval(k, t, w0),
            kappa: self.kappa.eval(k, t, w0),
        }
    }

    /// Coefficients along a common-noise path, with pathwise validation.
    pub fn coefficients_on(&self, path: &CommonNoisePath) -> Result<Vec<Coefficients>, CtError> {
        (0..self.n_times())
            .map(|k| {
                let c = self.coefficients(k, path.w0[k]);
                let t = self.t_grid[k];
                self.check_value("sigma", t, c.sigma)?;
                self.check_value("sigma0", t, c.sigma0)?;
                self.check_value("kappa", t, c.kappa)?;
                self.check_value("lambda", t, c.lambda)?;
                Ok(c)
            })
            .collect()
    }
}

/// Levels of `W⁰` on the time grid, starting from `W⁰_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonNoisePath {
    pub w0: Vec<f64>,
}

impl CommonNoisePath {
    pub fn generate(t_grid: &[f64], seed: u64) -> Self {
        Self::from_rng(t_grid, &mut rng::stream(seed, rng::COMMON_STREAM))
    }

    pub fn from_rng<R: Rng>(t_grid: &[f64], rng: &mut R) -> Self {
        let mut w0 = Vec::with_capacity(t_grid.len());
        w0.push(0.0);
        for k in 1..t_grid.len() {
            let g: f64 = rng.sample(StandardNormal);
            w0.push(w0[k - 1] + (t_grid[k] - t_grid[k - 1]).sqrt() * g);
        }
        Self { w0 }
    }

    pub fn increment(&self, k: usize) -> f64 {
        self.w0[k + 1] - self.w0[k]
    }
}

/// Read-only view of the population at one grid time.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    pub states: &'a [f64],
    /// `Σ⁰_t` of each particle.
    pub common_vol: &'a [f64],
    /// `B_t` of each particle.
    pub drift: &'a [f64],
}

/// Step context handed to controls.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub k: usize,
    pub t: f64,
    pub w0: f64,
    pub coef: Coefficients,
    /// Population at this time, when the control depends on one.
    pub env: Option<Environment<'a>>,
}

/// A reduced control `α_t(x)`.
pub trait Control: Sync {
    fn alpha(&self, ctx: &StepContext<'_>, x: f64) -> Result<f64, CtError>;
}

/// `α_t(x) = a_t · x` for a common-noise-adapted proportion `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Proportional(pub CoefficientProcess);

impl Control for Proportional {
    fn alpha(&self, ctx: &StepContext<'_>, x: f64) -> Result<f64, CtError> {
        Ok(self.0.eval(ctx.k, ctx.t, ctx.w0) * x)
    }
}

/// The equilibrium control `α_t(x) = σ⁰_t · x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumControl;

impl Control for EquilibriumControl {
    fn alpha(&self, ctx: &StepContext<'_>, x: f64) -> Result<f64, CtError> {
        Ok(ctx.coef.sigma0 * x)
    }
}

/// Any closure of `(t, x)`.
pub struct FnControl<F>(pub F);

impl<F: Fn(f64, f64) -> f64 + Sync> Control for FnControl<F> {
    fn alpha(&self, ctx: &StepContext<'_>, x: f64) -> Result<f64, CtError> {
        Ok((self.0)(ctx.t, x))
    }
}

/// Particles sharing one common-noise path. All per-particle tables are
/// particle-major with `n_times` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub times: Vec<f64>,
    pub w0: CommonNoisePath,
    pub n_particles: usize,
    pub states: Vec<f64>,
    /// `B_t(X_t) = α_t(X_t) λ_t`.
    pub drift: Vec<f64>,
    /// `Σ⁰_t(X_t) = α_t(X_t)`.
    pub common_vol: Vec<f64>,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn state(&self, p: usize, k: usize) -> f64 {
        self.states[p * self.n_times() + k]
    }

    pub fn path(&self, p: usize) -> &[f64] {
        &self.states[p * self.n_times()..(p + 1) * self.n_times()]
    }

    /// Cross-section of a particle-major table at grid index `k`.
    pub fn column(&self, table: &[f64], k: usize) -> Vec<f64> {
        (0..self.n_particles).map(|p| table[p * self.n_times() + k]).collect()
    }

    pub fn cross_section(&self, k: usize) -> Vec<f64> {
        self.column(&self.states, k)
    }
}

/// Cross-sections of an ensemble, time-major, for use as an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentTable {
    pub states: Vec<Vec<f64>>,
    pub common_vol: Vec<Vec<f64>>,
    pub drift: Vec<Vec<f64>>,
}

impl EnvironmentTable {
    pub fn from_ensemble(ens: &ParticleEnsemble) -> Self {
        let n = ens.n_times();
        Self {
            states: (0..n).map(|k| ens.cross_section(k)).collect(),
            common_vol: (0..n).map(|k| ens.column(&ens.common_vol, k)).collect(),
            drift: (0..n).map(|k| ens.column(&ens.drift, k)).collect(),
        }
    }

    pub fn at(&self, k: usize) -> Environment<'_> {
        Environment {
            states: &self.states[k],
            common_vol: &self.common_vol[k],
            drift: &self.drift[k],
        }
    }
}

/// Simulates the reduced dynamics `dX/X = a (λ dt + dW⁰) + v dW` with
/// `a = α/x` by the exponential Euler scheme. The common-noise path is drawn
/// from stream 0 of `seed`.
pub fn simulate_ensemble(m: &CtModel, control: &dyn Control, n_particles: usize, seed: u64) -> Result<ParticleEnsemble, CtError> {
    let path = CommonNoisePath::generate(&m.t_grid, seed);
    simulate_ensemble_with(m, control, &path, None, n_particles, seed)
}

/// As [`simulate_ensemble`] with an explicit common-noise path and an
/// optional population environment handed to the control.
pub fn simulate_ensemble_with(
    m: &CtModel,
    control: &dyn Control,
    path: &CommonNoisePath,
    env: Option<&EnvironmentTable>,
    n_particles: usize,
    seed: u64,
) -> Result<ParticleEnsemble, CtError> {
    if n_particles < 2 {
        return Err(CtError::TooFewParticles {
            min: 2,
            got: n_particles,
        });
    }
    let coefs = m.coefficients_on(path)?;
    let nt = m.n_times();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_particles)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::particle_stream(seed, p);
            let mut x = m.x0.sample(&mut r);
            let mut xs = Vec::with_capacity(nt);
            let mut bs = Vec::with_capacity(nt);
            let mut ss = Vec::with_capacity(nt);
            for k in 0..nt {
                let c = coefs[k];
                let ctx = StepContext {
                    k,
                    t: m.t_grid[k],
                    w0: path.w0[k],
                    coef: c,
                    env: env.map(|e| e.at(k)),
                };
                let alpha = control.alpha(&ctx, x)?;
                xs.push(x);
                ss.push(alpha);
                bs.push(alpha * c.lambda);
                if k + 1 == nt {
                    break;
                }
                let dt = m.t_grid[k + 1] - m.t_grid[k];
                let dw: f64 = dt.sqrt() * r.sample::<f64, _>(StandardNormal);
                let a = alpha / x;
                let v = c.v();
                x *= ((a * c.lambda - 0.5 * a * a - 0.5 * v * v) * dt + a * path.increment(k) + v * dw).exp();
                if !x.is_finite() || x <= 0.0 {
                    return Err(CtError::BlowUp {
                        time: m.t_grid[k + 1],
                        particle: p,
                    });
                }
            }
            Ok((xs, bs, ss))
        })
        .collect::<Result<_, CtError>>()?;
    let mut states = Vec::with_capacity(n_particles * nt);
    let mut drift = Vec::with_capacity(n_particles * nt);
    let mut common_vol = Vec::with_capacity(n_particles * nt);
    for (xs, bs, ss) in rows {
        states.extend(xs);
        drift.extend(bs);
        common_vol.extend(ss);
    }
    Ok(ParticleEnsemble {
        times: m.t_grid.clone(),
        w0: path.clone(),
        n_particles,
        states,
        drift,
        common_vol,
        seed,
    })
}

/// Cross-holding strategies as functions of `(x, x̂)`.
pub type Kernel<'a> = &'a (dyn Fn(f64, f64) -> f64 + Sync);

/// `m_t(x) = 1/(1 + mean_j π(x̂ⱼ, x))` over the population.
pub fn multiplier_at(env: &Environment<'_>, pi: Kernel<'_>, x: f64) -> Result<f64, CtError> {
    if env.states.is_empty() {
        return Err(CtError::EmptyEnsemble);
    }
    let d = 1.0 + stats::mean(&env.states.iter().map(|xh| pi(*xh, x)).collect::<Vec<_>>());
    if d.abs() < crate::model::TOL_ZERO {
        return Err(CtError::InadmissibleMultiplier(d));
    }
    Ok(1.0 / d)
}

/// Reduced control induced by `β`: `α = m (σ⁰(x) + mean_j β(x, x̂ⱼ) Σ⁰ⱼ)`,
/// where `sigma0_x` is the agent's own common volatility `σ⁰_t(x)`.
pub fn reduced_from_beta(env: &Environment<'_>, pi: Kernel<'_>, beta: Kernel<'_>, sigma0_x: f64, x: f64) -> Result<f64, CtError> {
    let m = multiplier_at(env, pi, x)?;
    let bought = stats::mean(
        &env.states
            .iter()
            .zip(env.common_vol)
            .map(|(xh, s)| beta(x, *xh) * s)
            .collect::<Vec<_>>(),
    );
    Ok(m * (sigma0_x + bought))
}

/// A holding slice `β_t(x, ·) = f · sign(Σ⁰)` reproducing a target control.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSlice {
    pub f: f64,
    /// `β(x, x̂ⱼ)` for every particle `j`.
    pub values: Vec<f64>,
}

pub fn beta_from_alpha(env: &Environment<'_>, m: f64, sigma0_x: f64, alpha: f64) -> Result<BetaSlice, CtError> {
    if env.common_vol.is_empty() {
        return Err(CtError::EmptyEnsemble);
    }
    let mean_abs = stats::mean(&env.common_vol.iter().map(|s| s.abs()).collect::<Vec<_>>());
    if mean_abs == 0.0 {
        return Err(CtError::DegenerateVolatility);
    }
    let f = (alpha / m - sigma0_x) / mean_abs;
    let values = env
        .common_vol
        .iter()
        .map(|s| if *s > 0.0 { f } else if *s < 0.0 { -f } else { 0.0 })
        .collect();
    Ok(BetaSlice { f, values })
}

/// Holdings constant in the second argument that implement a target control:
/// `π_t(xⱼ, ·) = ((1 + κ) αⱼ − σ⁰ⱼ)/mean(α)`. Returns one value per
/// particle and checks both defining identities on the population, with the
/// population's common volatility taken equal to `α`.
pub fn pi_from_alpha(alpha: &[f64], sigma0: &[f64], kappa: f64) -> Result<Vec<f64>, CtError> {
    if alpha.is_empty() || alpha.len() != sigma0.len() {
        return Err(CtError::Shape {
            got: (alpha.len(), sigma0.len()),
            expected: (alpha.len(), alpha.len()),
        });
    }
    if 1.0 + kappa == 0.0 {
        return Err(CtError::Precondition("kappa = -1".into()));
    }
    let mean_alpha = stats::mean(alpha);
    let mean_sigma0 = stats::mean(sigma0);
    let scale = mean_alpha.abs().max(mean_sigma0.abs()).max(1.0);
    if mean_alpha.abs() <= TOL_IDENTITY * scale || (mean_alpha - mean_sigma0).abs() > TOL_IDENTITY * scale {
        return Err(CtError::Precondition(format!(
            "mean control {mean_alpha} must be nonzero and equal the mean common volatility {mean_sigma0}"
        )));
    }
    let pi: Vec<f64> = alpha
        .iter()
        .zip(sigma0)
        .map(|(a, s)| ((1.0 + kappa) * a - s) / mean_alpha)
        .collect();

    // Multiplier: mean over holders of π(x̂, x) equals κ.
    let err_m = (stats::mean(&pi) - kappa).abs();
    if err_m > TOL_IDENTITY * (1.0 + kappa.abs()) {
        return Err(CtError::IdentityCheck {
            what: "multiplier",
            error: err_m,
        });
    }
    // Control: (σ⁰ + π mean(α))/(1 + κ) equals α.
    let err_a = alpha
        .iter()
        .zip(sigma0)
        .zip(&pi)
        .map(|((a, s), p)| ((s + p * mean_alpha) / (1.0 + kappa) - a).abs())
        .fold(0.0, f64::max);
    if err_a > TOL_IDENTITY * scale {
        return Err(CtError::IdentityCheck {
            what: "control",
            error: err_a,
        });
    }
    Ok(pi)
}

/// Two-factor holdings `π(x, x̂) = κ[g(x) + (x − g(x) mean(X)) f̂(x̂)/mean(f̂ X)]`
/// on the particle grid, checked against `mean_x̂ π(x, x̂) x̂ = κ x` and
/// `mean_x̂ π(x̂, x) = κ`.
pub fn pi_two_factor(kappa: f64, f_hat: &[f64], g: &[f64], states: &[f64]) -> Result<DMatrix<f64>, CtError> {
    let n = states.len();
    if n == 0 {
        return Err(CtError::EmptyEnsemble);
    }
    if f_hat.len() != n || g.len() != n {
        return Err(CtError::Shape {
            got: (f_hat.len(), g.len()),
            expected: (n, n),
        });
    }
    let mean_g = stats::mean(g);
    if (mean_g - 1.0).abs() > 1e-12 {
        return Err(CtError::Precondition(format!("mean of g is {mean_g}, expected 1")));
    }
    let mean_x = stats::mean(states);
    let mean_fx = stats::mean(&f_hat.iter().zip(states).map(|(f, x)| f * x).collect::<Vec<_>>());
    if mean_fx.abs() <= TOL_IDENTITY {
        return Err(CtError::Precondition("mean of f_hat * x vanishes".into()));
    }
    let pi = DMatrix::from_fn(n, n, |i, j| {
        kappa * (g[i] + (states[i] - g[i] * mean_x) * f_hat[j] / mean_fx)
    });
    let scale = 1.0 + kappa.abs() * (1.0 + states.iter().fold(0.0f64, |a, x| a.max(x.abs())));
    for i in 0..n {
        let held: f64 = (0..n).map(|j| pi[(i, j)] * states[j]).sum::<f64>() / n as f64;
        let e = (held - kappa * states[i]).abs();
        if e > TOL_IDENTITY * scale {
            return Err(CtError::IdentityCheck { what: "value identity", error: e });
        }
        let holders: f64 = (0..n).map(|j| pi[(j, i)]).sum::<f64>() / n as f64;
        let e = (holders - kappa).abs();
        if e > TOL_IDENTITY * scale {
            return Err(CtError::IdentityCheck { what: "mass identity", error: e });
        }
    }
    Ok(pi)
}

/// Simulates the full cross-holding dynamics
/// `dX = m (B̄ dt + Σ̄⁰ dW⁰ + σ X dW)` by plain Euler against a population
/// environment, where `B̄ = mean_j β(X, x̂ⱼ) Bⱼ + λ σ⁰ X` and
/// `Σ̄⁰ = mean_j β(X, x̂ⱼ) Σ⁰ⱼ + σ⁰ X`. Particles draw their initial state and
/// idiosyncratic increments in the same order as [`simulate_ensemble_with`].
pub fn simulate_cross_holding(
    m: &CtModel,
    env: &EnvironmentTable,
    pi: Kernel<'_>,
    beta: Kernel<'_>,
    path: &CommonNoisePath,
    n_particles: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, CtError> {
    let coefs = m.coefficients_on(path)?;
    let nt = m.n_times();
    (0..n_particles)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::particle_stream(seed, p);
            let mut x = m.x0.sample(&mut r);
            let mut xs = Vec::with_capacity(nt);
            for k in 0..nt {
                xs.push(x);
                if k + 1 == nt {
                    break;
                }
                let c = coefs[k];
                let e = env.at(k);
                let dt = m.t_grid[k + 1] - m.t_grid[k];
                let dw: f64 = dt.sqrt() * r.sample::<f64, _>(StandardNormal);
                let mult = multiplier_at(&e, pi, x)?;
                let nb = e.states.len() as f64;
                let (mut bb, mut bs) = (0.0, 0.0);
                for j in 0..e.states.len() {
                    let h = beta(x, e.states[j]);
                    bb += h * e.drift[j];
                    bs += h * e.common_vol[j];
                }
                let drift = bb / nb + c.lambda * c.sigma0 * x;
                let vol0 = bs / nb + c.sigma0 * x;
                x += mult * (drift * dt + vol0 * path.increment(k) + c.sigma * x * dw);
                if !x.is_finite() {
                    return Err(CtError::BlowUp {
                        time: m.t_grid[k + 1],
                        particle: p,
                    });
                }
            }
            Ok(xs)
        })
        .collect()
}

/// The reduced control induced by `(π, β)` against a population table.
pub struct ReducedControl<'a> {
    pub pi: Kernel<'a>,
    pub beta: Kernel<'a>,
}

impl Control for ReducedControl<'_> {
    fn alpha(&self, ctx: &StepContext<'_>, x: f64) -> Result<f64, CtError> {
        let env = ctx.env.ok_or(CtError::EmptyEnsemble)?;
        reduced_from_beta(&env, self.pi, self.beta, ctx.coef.sigma0 * x, x)
    }
}

/// Outcome of the drift/common-volatility proportionality test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NipVerdict {
    Proportional,
    Violated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NipReport {
    /// `λ̂_t`; `None` where the truncation set is empty.
    pub lambda_hat: Vec<Option<f64>>,
    /// Delta-method standard error of `λ̂_t`.
    pub stderr: Vec<Option<f64>>,
    /// RMS of `B − λ̂ Σ⁰` per time.
    pub residual_by_time: Vec<Option<f64>>,
    pub residual_norm: f64,
    pub tolerance: f64,
    pub verdict: NipVerdict,
    /// Grid indices where the estimator is undefined.
    pub undefined: Vec<usize>,
}

/// Per-time least-squares ratio of drift to common volatility over the
/// truncation set `{B² + (Σ⁰)² ≤ N, |Σ⁰| ≥ c}`. Inputs are particle-major
/// tables with `n_times` columns.
pub fn estimate_nip(b_vals: &[f64], s0_vals: &[f64], n_particles: usize, n_times: usize) -> Result<NipReport, CtError> {
    estimate_nip_with(b_vals, s0_vals, n_particles, n_times, NIP_C, NIP_N)
}

pub fn estimate_nip_with(
    b_vals: &[f64],
    s0_vals: &[f64],
    n_particles: usize,
    n_times: usize,
    c: f64,
    big_n: f64,
) -> Result<NipReport, CtError> {
    let expected = n_particles * n_times;
    if b_vals.len() != expected || s0_vals.len() != expected {
        return Err(CtError::Shape {
            got: (b_vals.len(), s0_vals.len()),
            expected: (expected, expected),
        });
    }
    if n_particles == 0 {
        return Err(CtError::EmptyEnsemble);
    }
    let mut lambda_hat = Vec::with_capacity(n_times);
    let mut stderr = Vec::with_capacity(n_times);
    let mut residual_by_time = Vec::with_capacity(n_times);
    let mut undefined = Vec::new();
    let (mut res_sq, mut res_count) = (0.0, 0usize);
    let mut b_sq = 0.0;
    for k in 0..n_times {
        let inside: Vec<(f64, f64)> = (0..n_particles)
            .map(|p| (b_vals[p * n_times + k], s0_vals[p * n_times + k]))
            .filter(|(b, s)| b * b + s * s <= big_n && s.abs() >= c)
            .collect();
        if inside.is_empty() {
            undefined.push(k);
            lambda_hat.push(None);
            stderr.push(None);
            residual_by_time.push(None);
            continue;
        }
        let sss: f64 = inside.iter().map(|(_, s)| s * s).sum();
        let ssb: f64 = inside.iter().map(|(b, s)| s * b).sum();
        let l = ssb / sss;
        let r2: f64 = inside.iter().map(|(b, s)| (b - l * s).powi(2)).sum();
        let se = inside.iter().map(|(b, s)| (s * (b - l * s)).powi(2)).sum::<f64>().sqrt() / sss;
        res_sq += r2;
        res_count += inside.len();
        b_sq += inside.iter().map(|(b, _)| b * b).sum::<f64>();
        lambda_hat.push(Some(l));
        stderr.push(Some(se));
        residual_by_time.push(Some((r2 / inside.len() as f64).sqrt()));
    }
    let (residual_norm, tolerance) = if res_count > 0 {
        (
            (res_sq / res_count as f64).sqrt(),
            TOL_NIP_REL * (b_sq / res_count as f64).sqrt(),
        )
    } else {
        (f64::NAN, 0.0)
    };
    let verdict = if residual_norm <= tolerance {
        NipVerdict::Proportional
    } else {
        NipVerdict::Violated
    };
    Ok(NipReport {
        lambda_hat,
        stderr,
        residual_by_time,
        residual_norm,
        tolerance,
        verdict,
        undefined,
    })
}

/// Empirical check of `E[Z_T] = 1` and `E[Z_T²] ≤ exp(∫λ²)` for the
/// stochastic exponential of `∫λ dW⁰`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoleansDadeReport {
    pub mean: f64,
    pub stderr: f64,
    pub second_moment: f64,
    /// `exp(T sup λ²)` on the sampled paths.
    pub second_moment_bound: f64,
    pub passed: bool,
}

pub fn doleans_dade_check(m: &CtModel, n_paths: usize, seed: u64) -> Result<DoleansDadeReport, CtError> {
    let nt = m.n_times();
    let samples: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::particle_stream(seed, p);
            let path = CommonNoisePath::from_rng(&m.t_grid, &mut r);
            let mut log_z = 0.0;
            let mut max_l2: f64 = 0.0;
            for k in 0..nt - 1 {
                let l = m.lambda.eval(k, m.t_grid[k], path.w0[k]);
                let dt = m.t_grid[k + 1] - m.t_grid[k];
                log_z += l * path.increment(k) - 0.5 * l * l * dt;
                max_l2 = max_l2.max(l * l);
            }
            (log_z.exp(), max_l2)
        })
        .collect();
    let zs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ms = stats::mean_se(&zs);
    let second = stats::mean(&zs.iter().map(|z| z * z).collect::<Vec<_>>());
    let max_l2 = samples.iter().map(|s| s.1).fold(0.0, f64::max);
    let bound = (m.horizon() * max_l2).exp();
    Ok(DoleansDadeReport {
        mean: ms.mean,
        stderr: ms.se,
        second_moment: second,
        second_moment_bound: bound,
        passed: (ms.mean - 1.0).abs() <= 3.0 * ms.se && second <= 1.5 * bound,
    })
}
