//! Quadratic BSDE of the power-utility equilibrium and the closed-form log-
//! and power-utility Black–Scholes equilibria.
//!
//! The BSDE is driven by `W⁰` only, so the backward scheme works on common-
//! noise paths and regresses on Hermite polynomials of the standardized
//! level `W⁰_t / √t`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::ctsim::{CommonNoisePath, CoefficientProcess, CtError, CtModel};
use crate::linalg;
use crate::rng;
use crate::stats::{self, MeanSe};

/// Default polynomial degree of the regression basis.
pub const DEFAULT_DEGREE: usize = 3;
/// Default clipping level of `Z` inside the driver.
pub const DEFAULT_Z_CAP: f64 = 50.0;
/// Default bound on `|Y|` beyond which the scheme is declared divergent.
pub const DEFAULT_Y_BOUND: f64 = 1e6;
/// Hard cap of the empirical exponential-moment gate.
pub const GATE_CAP: f64 = 1e6;
/// Tolerance of the pathwise equilibrium identities.
pub const TOL_EQUILIBRIUM: f64 = 1e-10;
/// Relative singular-value floor of the regression design.
const TOL_RANK: f64 = 1e-10;
const PAR_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BsdeError {
    #[error(transparent)]
    Ct(#[from] CtError),
    #[error("power exponent p in (0, 1) is required")]
    MissingExponent,
    #[error("regression design is rank deficient at t = {time}")]
    RankDeficient { time: f64 },
    #[error("backward scheme did not converge at t = {time}: {reason}")]
    NonConvergence { time: f64, reason: String },
    #[error("no equilibrium: deviation {deviation} at t = {time} on path {path}")]
    NoEquilibrium { time: f64, path: usize, deviation: f64 },
    #[error("solution grid does not match the model grid")]
    GridMismatch,
    #[error("at least {min} paths are required, got {got}")]
    TooFewPaths { min: usize, got: usize },
}

/// Settings of the backward regression scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeConfig {
    pub degree: usize,
    pub z_cap: f64,
    pub y_bound: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            degree: DEFAULT_DEGREE,
            z_cap: DEFAULT_Z_CAP,
            y_bound: DEFAULT_Y_BOUND,
        }
    }
}

/// Probabilists' Hermite polynomials `He_0..He_degree` at `u`.
fn hermite(u: f64, degree: usize, out: &mut [f64]) {
    out[0] = 1.0;
    if degree >= 1 {
        out[1] = u;
    }
    for j in 2..=degree {
        out[j] = u * out[j - 1] - (j - 1) as f64 * out[j - 2];
    }
}

/// Regression basis at one grid time.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Basis {
    degree: usize,
    scale: f64,
}

impl Basis {
    fn at(t: f64, degree: usize) -> Self {
        if t > 0.0 {
            Basis {
                degree,
                scale: 1.0 / t.sqrt(),
            }
        } else {
            Basis { degree: 0, scale: 0.0 }
        }
    }

    fn eval(&self, coef: &[f64], w: f64) -> f64 {
        let mut h = [0.0; 16];
        hermite(w * self.scale, self.degree, &mut h);
        coef.iter().zip(&h).map(|(c, b)| c * b).sum()
    }
}

/// Least-squares projection of `target` on the basis evaluated at `w`.
fn regress(basis: Basis, w: &[f64], target: &[f64], time: f64) -> Result<Vec<f64>, BsdeError> {
    let d = basis.degree + 1;
    let first = target[0];
    if target.iter().all(|v| *v == first) {
        let mut c = vec![0.0; d];
        c[0] = first;
        return Ok(c);
    }
    if w.len() < d {
        return Err(BsdeError::RankDeficient { time });
    }
    // Chunked accumulation in fixed order keeps results independent of the
    // thread count.
    let partial: Vec<(Vec<f64>, Vec<f64>)> = w
        .par_chunks(PAR_CHUNK)
        .zip(target.par_chunks(PAR_CHUNK))
        .map(|(wc, tc)| {
            let mut gram = vec![0.0; d * d];
            let mut rhs = vec![0.0; d];
            let mut h = [0.0; 16];
            for (wi, ti) in wc.iter().zip(tc) {
                hermite(wi * basis.scale, basis.degree, &mut h);
                for a in 0..d {
                    rhs[a] += h[a] * ti;
                    for b in 0..d {
                        gram[a * d + b] += h[a] * h[b];
                    }
                }
            }
            (gram, rhs)
        })
        .collect();
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for (g, r) in partial {
        for a in 0..d {
            rhs[a] += r[a];
            for b in 0..d {
                gram[(a, b)] += g[a * d + b];
            }
        }
    }
    let spec = linalg::Spectrum::of(&gram);
    if !(spec.s_min > TOL_RANK * spec.s_max) {
        return Err(BsdeError::RankDeficient { time });
    }
    let sol = linalg::solve_refined(&gram, &rhs).ok_or(BsdeError::RankDeficient { time })?;
    Ok(sol.iter().cloned().collect())
}

/// Driver of the quadratic BSDE.
pub fn driver(z: f64, lambda: f64, sigma: f64, kappa: f64, p: f64) -> f64 {
    let v = sigma / (1.0 + kappa);
    0.5 * (z * z + p * (lambda + z).powi(2) / (1.0 - p) - p * (1.0 - p) * v * v)
}

/// Outcome of the empirical exponential-moment gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentGate {
    pub estimate: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    pub times: Vec<f64>,
    /// `W⁰` levels, paths × times.
    pub w0: DMatrix<f64>,
    /// `Y`, paths × times.
    pub y: DMatrix<f64>,
    /// `Z` on `[t_k, t_{k+1})`, paths × (times − 1).
    pub z: DMatrix<f64>,
    pub terminal_residual: f64,
    /// Largest mean defect of a backward step.
    pub step_residual: f64,
    pub gate: MomentGate,
    pub degree: usize,
    y_coef: Vec<Vec<f64>>,
    z_coef: Vec<Vec<f64>>,
}

impl BsdeSolution {
    pub fn n_paths(&self) -> usize {
        self.y.nrows()
    }

    /// `Y` at grid index `k` on any path with `W⁰_{t_k} = w`.
    pub fn y_at(&self, k: usize, w: f64) -> f64 {
        Basis::at(self.times[k], self.degree).eval(&self.y_coef[k], w)
    }

    /// `Z` at grid index `k < n_times − 1` on any path with `W⁰_{t_k} = w`.
    pub fn z_at(&self, k: usize, w: f64) -> f64 {
        Basis::at(self.times[k], self.degree).eval(&self.z_coef[k], w)
    }

    pub fn y0(&self) -> f64 {
        self.y[(0, 0)]
    }

    /// Per-time summary `(t, mean Y, sd Y, mean Z)`; `Z` at the last time is
    /// reported as that of the last interval.
    pub fn summary(&self) -> Vec<(f64, f64, f64, f64)> {
        let nt = self.times.len();
        (0..nt)
            .map(|k| {
                let col: Vec<f64> = self.y.column(k).iter().cloned().collect();
                let sd = if col.len() > 1 { stats::variance(&col).sqrt() } else { 0.0 };
                let zk = self.z.column(k.min(nt - 2)).mean();
                (self.times[k], stats::mean(&col), sd, zk)
            })
            .collect()
    }
}

fn exponent(m: &CtModel) -> Result<f64, BsdeError> {
    match m.p {
        Some(p) if p > 0.0 && p < 1.0 => Ok(p),
        _ => Err(BsdeError::MissingExponent),
    }
}

fn sample_paths(m: &CtModel, n_paths: usize, seed: u64) -> Vec<CommonNoisePath> {
    (0..n_paths)
        .into_par_iter()
        .map(|p| CommonNoisePath::from_rng(&m.t_grid, &mut rng::particle_stream(seed, p)))
        .collect()
}

pub fn solve_qbsde(m: &CtModel, n_paths: usize, seed: u64) -> Result<BsdeSolution, BsdeError> {
    solve_qbsde_with(m, n_paths, seed, SchemeConfig::default())
}

pub fn solve_qbsde_with(m: &CtModel, n_paths: usize, seed: u64, cfg: SchemeConfig) -> Result<BsdeSolution, BsdeError> {
    let p = exponent(m)?;
    if n_paths < 1 {
        return Err(BsdeError::TooFewPaths { min: 1, got: n_paths });
    }
    if cfg.degree >= 16 {
        return Err(BsdeError::NonConvergence {
            time: 0.0,
            reason: "basis degree must be below 16".into(),
        });
    }
    let nt = m.n_times();
    let paths = sample_paths(m, n_paths, seed);
    let coefs = paths
        .iter()
        .map(|path| m.coefficients_on(path))
        .collect::<Result<Vec<_>, _>>()?;
    let gate = moment_gate(m, p, &paths, &coefs);
    if !gate.passed {
        log::warn!("exponential-moment gate estimate {} exceeds cap {}", gate.estimate, GATE_CAP);
    }

    let w0 = DMatrix::from_fn(n_paths, nt, |i, k| paths[i].w0[k]);
    let mut y = DMatrix::<f64>::zeros(n_paths, nt);
    let mut z = DMatrix::<f64>::zeros(n_paths, nt - 1);
    let mut y_coef = vec![Vec::new(); nt];
    let mut z_coef = vec![Vec::new(); nt - 1];
    y_coef[nt - 1] = vec![0.0];
    let mut step_residual: f64 = 0.0;

    for k in (0..nt - 1).rev() {
        let t = m.t_grid[k];
        let dt = m.t_grid[k + 1] - t;
        let basis = Basis::at(t, cfg.degree);
        let wk: Vec<f64> = w0.column(k).iter().cloned().collect();
        let next: Vec<f64> = y.column(k + 1).iter().cloned().collect();
        let ybar = if next.iter().all(|v| *v == next[0]) {
            next[0]
        } else {
            stats::mean(&next)
        };

        let z_target: Vec<f64> = (0..n_paths)
            .map(|i| (next[i] - ybar) * (w0[(i, k + 1)] - wk[i]) / dt)
            .collect();
        let zc = regress(basis, &wk, &z_target, t)?;
        let zk: Vec<f64> = wk.iter().map(|w| basis.eval(&zc, *w)).collect();

        let y_target: Vec<f64> = (0..n_paths)
            .map(|i| {
                let c = coefs[i][k];
                let zi = zk[i].clamp(-cfg.z_cap, cfg.z_cap);
                next[i] + driver(zi, c.lambda, c.sigma, c.kappa, p) * dt
            })
            .collect();
        let yc = regress(basis, &wk, &y_target, t)?;
        let yk: Vec<f64> = wk.iter().map(|w| basis.eval(&yc, *w)).collect();

        if let Some(v) = yk.iter().find(|v| !v.is_finite() || v.abs() > cfg.y_bound) {
            return Err(BsdeError::NonConvergence {
                time: t,
                reason: format!("|Y| = {} exceeds bound {}", v.abs(), cfg.y_bound),
            });
        }
        let defect = stats::mean(&y_target.iter().zip(&yk).map(|(a, b)| a - b).collect::<Vec<_>>());
        step_residual = step_residual.max(defect.abs());
        for i in 0..n_paths {
            y[(i, k)] = yk[i];
            z[(i, k)] = zk[i];
        }
        y_coef[k] = yc;
        z_coef[k] = zc;
    }

    // The clipped driver must not have been active at the solution.
    let z_max = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if z_max > cfg.z_cap {
        return Err(BsdeError::NonConvergence {
            time: 0.0,
            reason: format!("|Z| = {z_max} exceeds the clipping level {}", cfg.z_cap),
        });
    }
    let terminal_residual = y.column(nt - 1).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(BsdeSolution {
        times: m.t_grid.clone(),
        w0,
        y,
        z,
        terminal_residual,
        step_residual,
        gate,
        degree: cfg.degree,
        y_coef,
        z_coef,
    })
}

/// Empirical `E[exp((2−p)/(1−p) |ξ|)]` with
/// `ξ = p ∫(λ²/(1−p) − (1−p)σ²/(1+κ)²) dr`.
fn moment_gate(m: &CtModel, p: f64, paths: &[CommonNoisePath], coefs: &[Vec<crate::ctsim::Coefficients>]) -> MomentGate {
    let q = (2.0 - p) / (1.0 - p);
    let vals: Vec<f64> = paths
        .iter()
        .zip(coefs)
        .map(|(_, c)| {
            let xi: f64 = (0..m.n_times() - 1)
                .map(|k| {
                    let v = c[k].v();
                    p * (c[k].lambda.powi(2) / (1.0 - p) - (1.0 - p) * v * v) * (m.t_grid[k + 1] - m.t_grid[k])
                })
                .sum();
            (q * xi.abs()).exp().min(GATE_CAP * 10.0)
        })
        .collect();
    let estimate = stats::mean(&vals);
    MomentGate {
        estimate,
        passed: estimate.is_finite() && estimate < GATE_CAP,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquilibriumKind {
    Log,
    Power,
}

/// Equilibrium processes sampled on paths × times.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumCt {
    pub kind: EquilibriumKind,
    pub times: Vec<f64>,
    pub lambda: DMatrix<f64>,
    pub required_sigma0: DMatrix<f64>,
    pub hat_a: DMatrix<f64>,
    pub kappa: DMatrix<f64>,
    /// Largest pathwise deviation of the equilibrium identity.
    pub max_deviation: f64,
}

/// Log-utility equilibrium: exists iff `σ⁰ ≡ λ`, with `â = λ`. Noise-driven
/// coefficients are checked on `n_paths` sampled common-noise paths.
pub fn log_equilibrium(m: &CtModel, n_paths: usize, seed: u64) -> Result<EquilibriumCt, BsdeError> {
    let n = if m.is_deterministic() { 1 } else { n_paths.max(1) };
    let paths = sample_paths(m, n, seed);
    let nt = m.n_times();
    let mut lambda = DMatrix::zeros(n, nt);
    let mut kappa = DMatrix::zeros(n, nt);
    let mut worst = (0.0f64, 0usize, 0usize);
    for (i, path) in paths.iter().enumerate() {
        let c = m.coefficients_on(path)?;
        for k in 0..nt {
            lambda[(i, k)] = c[k].lambda;
            kappa[(i, k)] = c[k].kappa;
            let dev = (c[k].sigma0 - c[k].lambda).abs();
            if dev > worst.0 {
                worst = (dev, i, k);
            }
        }
    }
    if worst.0 > TOL_EQUILIBRIUM * (1.0 + lambda.amax()) {
        return Err(BsdeError::NoEquilibrium {
            time: m.t_grid[worst.2],
            path: worst.1,
            deviation: worst.0,
        });
    }
    Ok(EquilibriumCt {
        kind: EquilibriumKind::Log,
        times: m.t_grid.clone(),
        required_sigma0: lambda.clone(),
        hat_a: lambda.clone(),
        lambda,
        kappa,
        max_deviation: worst.0,
    })
}

/// Power-utility equilibrium: exists iff `(1−p)σ⁰ = λ + Z` pathwise, with
/// `â = (λ + Z)/(1−p)`. Checked on the solver's paths for `t < T`.
pub fn power_equilibrium(m: &CtModel, sol: &BsdeSolution) -> Result<EquilibriumCt, BsdeError> {
    power_equilibrium_with(m, sol, TOL_EQUILIBRIUM)
}

pub fn power_equilibrium_with(m: &CtModel, sol: &BsdeSolution, tol: f64) -> Result<EquilibriumCt, BsdeError> {
    let p = exponent(m)?;
    if sol.times != m.t_grid {
        return Err(BsdeError::GridMismatch);
    }
    let (n, nt) = (sol.n_paths(), m.n_times());
    let mut lambda = DMatrix::zeros(n, nt - 1);
    let mut kappa = DMatrix::zeros(n, nt - 1);
    let mut required = DMatrix::zeros(n, nt - 1);
    let mut worst = (0.0f64, 0usize, 0usize);
    for i in 0..n {
        for k in 0..nt - 1 {
            let c = m.coefficients(k, sol.w0[(i, k)]);
            let req = (c.lambda + sol.z[(i, k)]) / (1.0 - p);
            lambda[(i, k)] = c.lambda;
            kappa[(i, k)] = c.kappa;
            required[(i, k)] = req;
            let dev = ((1.0 - p) * c.sigma0 - c.lambda - sol.z[(i, k)]).abs();
            if dev > worst.0 {
                worst = (dev, i, k);
            }
        }
    }
    if worst.0 > tol {
        return Err(BsdeError::NoEquilibrium {
            time: m.t_grid[worst.2],
            path: worst.1,
            deviation: worst.0,
        });
    }
    Ok(EquilibriumCt {
        kind: EquilibriumKind::Power,
        times: m.t_grid[..nt - 1].to_vec(),
        hat_a: required.clone(),
        required_sigma0: required,
        lambda,
        kappa,
        max_deviation: worst.0,
    })
}

/// Utility of terminal wealth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility {
    Log,
    Power(f64),
}

impl Utility {
    pub fn of(m: &CtModel) -> Self {
        match m.p {
            Some(p) => Utility::Power(p),
            None => Utility::Log,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Utility::Log => x.ln(),
            Utility::Power(p) => x.powf(*p) / p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRow {
    pub a: f64,
    pub objective: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of `E[U(X_T^a)]` for constant proportional controls
/// `a` under `dX/X = a(λ dt + dW⁰) + v dW`, with common random numbers across
/// the grid.
pub fn grid_search(m: &CtModel, utility: Utility, grid: &[f64], n_paths: usize, seed: u64) -> Result<Vec<GridRow>, BsdeError> {
    if n_paths < 2 {
        return Err(BsdeError::TooFewPaths { min: 2, got: n_paths });
    }
    let nt = m.n_times();
    let samples: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut r = rng::particle_stream(seed, path);
            let x0 = m.x0.sample(&mut r);
            let mut logs = vec![x0.ln(); grid.len()];
            let mut w = 0.0;
            for k in 0..nt - 1 {
                let c = m.coefficients(k, w);
                let dt = m.t_grid[k + 1] - m.t_grid[k];
                let dw0: f64 = dt.sqrt() * r.sample::<f64, _>(StandardNormal);
                let dw: f64 = dt.sqrt() * r.sample::<f64, _>(StandardNormal);
                let v = c.v();
                for (l, a) in logs.iter_mut().zip(grid) {
                    *l += (a * c.lambda - 0.5 * a * a - 0.5 * v * v) * dt + a * dw0 + v * dw;
                }
                w += dw0;
            }
            Ok(logs.into_iter().map(|l| utility.eval(l.exp())).collect())
        })
        .collect::<Result<_, CtError>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            let MeanSe { mean, se } = stats::mean_se(&col);
            GridRow {
                a: *a,
                objective: mean,
                stderr: se,
            }
        })
        .collect())
}

/// Grid point with the largest objective.
pub fn grid_maximizer(rows: &[GridRow]) -> Option<f64> {
    rows.iter()
        .max_by(|a, b| a.objective.total_cmp(&b.objective))
        .map(|r| r.a)
}

/// `t ↦ E[V_t]` for a candidate control, with paired standard errors of
/// `V_t − V_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingaleReport {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Mean and standard error of `V_t − V_0`.
    pub drift: Vec<MeanSe>,
    /// Probe indices used for the flatness test.
    pub probes: Vec<usize>,
    /// Every probe satisfies `|E[V_t − V_0]| ≤ 3 SE`.
    pub flat: bool,
    /// Some time has `E[V_t − V_0] > 3 SE`.
    pub significant_increase: bool,
    /// `E[V_0 − V_T]` divided by its standard error.
    pub terminal_gap_z: f64,
}

/// Monte Carlo check of the supermartingale property of
/// `V_t = U(X_t^a) exp(Y_t)` (power) or
/// `V_t = log X_t − ∫_0^t (aλ − ½a² − ½v²) ds` (log), on fresh paths.
pub fn verify_supermartingale(
    m: &CtModel,
    sol: Option<&BsdeSolution>,
    a: &CoefficientProcess,
    n_paths: usize,
    seed: u64,
) -> Result<SupermartingaleReport, BsdeError> {
    let utility = Utility::of(m);
    if let (Utility::Power(_), None) = (utility, sol) {
        return Err(BsdeError::MissingExponent);
    }
    if let Some(s) = sol {
        if s.times != m.t_grid {
            return Err(BsdeError::GridMismatch);
        }
    }
    if n_paths < 2 {
        return Err(BsdeError::TooFewPaths { min: 2, got: n_paths });
    }
    let nt = m.n_times();
    let rows: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut r = rng::particle_stream(seed, path);
            let mut logx = m.x0.sample(&mut r).ln();
            let mut w = 0.0;
            let mut comp = 0.0;
            let mut out = Vec::with_capacity(nt);
            for k in 0..nt {
                let t = m.t_grid[k];
                out.push(match (utility, sol) {
                    (Utility::Power(p), Some(s)) => (p * logx).exp() / p * s.y_at(k, w).exp(),
                    _ => logx - comp,
                });
                if k + 1 == nt {
                    break;
                }
                let c = m.coefficients(k, w);
                let ak = a.eval(k, t, w);
                let dt = m.t_grid[k + 1] - t;
                let dw0: f64 = dt.sqrt() * r.sample::<f64, _>(StandardNormal);
                let dw: f64 = dt.sqrt() * r.sample::<f64, _>(StandardNormal);
                let v = c.v();
                let growth = (ak * c.lambda - 0.5 * ak * ak - 0.5 * v * v) * dt;
                logx += growth + ak * dw0 + v * dw;
                comp += growth;
                w += dw0;
            }
            out
        })
        .collect();
    let mut mean = Vec::with_capacity(nt);
    let mut stderr = Vec::with_capacity(nt);
    let mut drift = Vec::with_capacity(nt);
    for k in 0..nt {
        let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let ms = stats::mean_se(&col);
        mean.push(ms.mean);
        stderr.push(ms.se);
        let diff: Vec<f64> = rows.iter().map(|r| r[k] - r[0]).collect();
        drift.push(stats::mean_se(&diff));
    }
    let probes: Vec<usize> = (0..5).map(|j| j * (nt - 1) / 4).collect();
    let flat = probes.iter().all(|&k| drift[k].mean.abs() <= 3.0 * drift[k].se);
    let significant_increase = drift.iter().any(|d| d.mean > 3.0 * d.se && d.se > 0.0);
    let last = drift[nt - 1];
    let terminal_gap_z = if last.se > 0.0 { -last.mean / last.se } else { 0.0 };
    Ok(SupermartingaleReport {
        times: m.t_grid.clone(),
        mean,
        stderr,
        drift,
        probes,
        flat,
        significant_increase,
        terminal_gap_z,
    })
}
