//! Subcommand implementations.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use crossmfg::bsde::{self, BsdeError, Utility};
use crossmfg::ctsim::{self, Control, CtError, CtModel, EnvironmentTable, EquilibriumControl, NipVerdict, Proportional};
use crossmfg::fredholm::{self, FredholmError};
use crossmfg::io::{fmt_num, CsvTable, PathTable};
use crossmfg::oneperiod::{self, NaOutcome, OnePeriodError};
use crossmfg::scenario::{ControlSpec, Scenario};

use crate::output::Run;
use crate::{GlobalArgs, UtilityArg};

pub enum Outcome {
    Success,
    Verdict(String),
}

fn load(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Scenario::from_toml_str(&text).with_context(|| format!("in scenario {}", path.display()))
}

fn start(g: &GlobalArgs, path: &Path, command: &str) -> Result<(Scenario, u64, Run)> {
    let sc = load(path)?;
    let seed = g.seed.unwrap_or(sc.seed);
    let run = Run::new(&g.out_dir, &sc.id, seed, command)?;
    Ok((sc, seed, run))
}

/// Records a verdict and ends the run.
fn verdict(mut run: Run, kind: &str, detail: impl std::fmt::Display) -> Result<Outcome> {
    let detail = detail.to_string();
    run.write_json("verdict.json", &json!({ "verdict": kind, "detail": detail }))?;
    run.finish(Some(kind))?;
    Ok(Outcome::Verdict(format!("{kind}: {detail}")))
}

fn is_existence_failure(e: &OnePeriodError) -> bool {
    matches!(
        e,
        OnePeriodError::NonPositiveMeanDrift { .. }
            | OnePeriodError::NotCollinear { .. }
            | OnePeriodError::SignMismatch { .. }
    )
}

pub fn one_period_solve(g: &GlobalArgs, path: &Path) -> Result<Outcome> {
    let (sc, _, mut run) = start(g, path, "one-period solve")?;
    let model = sc.one_period_model()?;
    let col = match oneperiod::check_collinearity(&model) {
        Ok(c) => c,
        Err(e) if is_existence_failure(&e) => return verdict(run, "no-equilibrium", e),
        Err(e) => return Err(e.into()),
    };
    let sign = g.sign.unwrap_or(col.matched);
    let pi = sc.kernel(&model)?;
    let eq = match oneperiod::equilibrium(&model, sign, &pi) {
        Ok(eq) => eq,
        Err(e) if is_existence_failure(&e) => return verdict(run, "no-equilibrium", e),
        Err(OnePeriodError::Fredholm(FredholmError::NonUnique(r))) => {
            return verdict(
                run,
                "non-unique",
                format!("field equation is singular (condition number {})", r.condition_number),
            )
        }
        Err(e) => return Err(e.into()),
    };

    let atoms = model.mu0.atoms();
    let mut field = CsvTable::new(&["atom", "x", "f0", "f1"]);
    for i in 0..model.n_atoms() {
        field.push(vec![i.to_string(), fmt_num(atoms[i]), fmt_num(eq.f.f0[i]), fmt_num(eq.f.f1[i])]);
    }
    run.write("field.csv", field.to_csv())?;

    let detention = oneperiod::net_detention(&model, &pi)?;
    let balance = oneperiod::drift_balance_residual(&model, &pi)?;
    let mut det = CsvTable::new(&["atom", "x", "net_detention", "drift_balance_residual"]);
    for i in 0..model.n_atoms() {
        det.push(vec![i.to_string(), fmt_num(atoms[i]), fmt_num(detention[i]), fmt_num(balance[i])]);
    }
    run.write("detention.csv", det.to_csv())?;

    let res = fredholm::residual_grid(&model, &pi, &eq.f)?;
    let mut rt = CsvTable::new(&["atom", "node", "eps0", "residual"]);
    for i in 0..res.nrows() {
        for k in 0..res.ncols() {
            rt.push(vec![
                i.to_string(),
                k.to_string(),
                fmt_num(model.rho.nodes()[k]),
                fmt_num(res[(i, k)]),
            ]);
        }
    }
    run.write("residual.csv", rt.to_csv())?;
    let residual_max = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    run.write_json(
        "summary.json",
        &json!({
            "lambda": eq.lambda,
            "mean_b": col.mean_b,
            "sign": sign,
            "field_error": eq.field_error,
            "foc_residual": eq.foc_residual,
            "residual_max": residual_max,
            "condition_number": eq.report.condition_number,
            "spectral_gap": eq.report.spectral_gap,
        }),
    )?;
    println!("lambda = {}", eq.lambda);
    println!("E[b] = {}", col.mean_b);
    println!("field residual = {residual_max:e}");
    println!("FOC residual = {:e}", eq.foc_residual);
    run.finish(None)?;
    Ok(Outcome::Success)
}

pub fn one_period_na_check(g: &GlobalArgs, path: &Path) -> Result<Outcome> {
    let (sc, _, mut run) = start(g, path, "one-period na-check")?;
    let model = sc.one_period_model()?;
    let f = match oneperiod::check_collinearity(&model) {
        Ok(col) => oneperiod::equilibrium_field(&model, g.sign.unwrap_or(col.matched)),
        Err(e) if is_existence_failure(&e) => {
            let pi = sc.kernel(&model)?;
            fredholm::solve_field(&model, &pi).map(|(f, _)| f).map_err(OnePeriodError::from)
        }
        Err(e) => Err(e),
    };
    let f = match f {
        Ok(f) => f,
        Err(e) if is_existence_failure(&e) => return verdict(run, "no-equilibrium", e),
        Err(OnePeriodError::Fredholm(FredholmError::NonUnique(_))) => {
            return verdict(run, "non-unique", "field equation is singular")
        }
        Err(e) => return Err(e.into()),
    };
    match oneperiod::find_na_certificate(&model, &f) {
        Ok(NaOutcome::Certificate(cert)) => {
            let mut t = CsvTable::new(&["node", "eps0", "weight", "z"]);
            for k in 0..cert.z.len() {
                t.push(vec![
                    k.to_string(),
                    fmt_num(model.rho.nodes()[k]),
                    fmt_num(model.rho.weights()[k]),
                    fmt_num(cert.z[k]),
                ]);
            }
            run.write("z.csv", t.to_csv())?;
            let coli = oneperiod::check_condition_coli(&model, &cert);
            run.write_json(
                "summary.json",
                &json!({
                    "outcome": "certificate",
                    "mean_check": cert.mean_check,
                    "tilt": cert.tilt,
                    "orthogonality": cert.orthogonality,
                    "tilt_condition_holds": coli.holds,
                    "tilt_condition_residual": coli.worst_residual,
                }),
            )?;
            println!("certificate: tilt = {}, orthogonality = {:e}", cert.tilt, cert.orthogonality);
            run.finish(None)?;
            Ok(Outcome::Success)
        }
        Ok(NaOutcome::Arbitrage(w)) => {
            let mut t = CsvTable::new(&["atom", "x", "beta"]);
            for i in 0..w.beta.len() {
                t.push(vec![i.to_string(), fmt_num(model.mu0.atoms()[i]), fmt_num(w.beta[i])]);
            }
            run.write("witness.csv", t.to_csv())?;
            let mut gt = CsvTable::new(&["node", "eps0", "gain"]);
            for k in 0..w.gains.len() {
                gt.push(vec![k.to_string(), fmt_num(model.rho.nodes()[k]), fmt_num(w.gains[k])]);
            }
            run.write("gains.csv", gt.to_csv())?;
            let best = w.gains.iter().cloned().fold(0.0, f64::max);
            verdict(run, "arbitrage", format!("witness with maximal gain {best:e}"))
        }
        Err(e @ OnePeriodError::NaUndecided { .. }) => verdict(run, "undecided", e),
        Err(e) => Err(e.into()),
    }
}

pub fn one_period_nplayer(g: &GlobalArgs, path: &Path) -> Result<Outcome> {
    let (sc, seed, mut run) = start(g, path, "one-period nplayer")?;
    let model = sc.one_period_model()?;
    let spec = sc.nplayer.clone().ok_or_else(|| anyhow!("scenario has no [nplayer] section"))?;
    let col = match oneperiod::check_collinearity(&model) {
        Ok(c) => c,
        Err(e) if is_existence_failure(&e) => return verdict(run, "no-equilibrium", e),
        Err(e) => return Err(e.into()),
    };
    let pi = sc.kernel(&model)?;
    let eq = match oneperiod::equilibrium(&model, g.sign.unwrap_or(col.matched), &pi) {
        Ok(eq) => eq,
        Err(e) if is_existence_failure(&e) => return verdict(run, "no-equilibrium", e),
        Err(e) => return Err(e.into()),
    };
    let rows = oneperiod::convergence_study(
        &model,
        &pi,
        &pi,
        &eq.f,
        &spec.n,
        seed..seed + spec.seeds,
        spec.sampling,
        spec.eps0,
    )?;
    let mut t = CsvTable::new(&["N", "wasserstein_error", "stderr"]);
    for r in &rows {
        t.push(vec![r.n.to_string(), fmt_num(r.error), fmt_num(r.stderr)]);
    }
    run.write("convergence.csv", t.to_csv())?;
    let slope = if rows.len() >= 2 { oneperiod::convergence_slope(&rows) } else { f64::NAN };
    run.write_json("summary.json", &json!({ "slope": slope, "seeds": spec.seeds, "n": spec.n }))?;
    println!("log-log slope = {slope}");
    run.finish(None)?;
    Ok(Outcome::Success)
}

fn control_of(spec: Option<&ControlSpec>) -> Box<dyn Control> {
    match spec {
        None | Some(ControlSpec::Equilibrium) => Box::new(EquilibriumControl),
        Some(ControlSpec::Proportional { a }) => Box::new(Proportional(a.clone())),
    }
}

fn simulate(sc: &Scenario, seed: u64) -> Result<(CtModel, ctsim::ParticleEnsemble)> {
    let spec = sc.ct_spec()?;
    let m = spec.build()?;
    let control = control_of(spec.control.as_ref());
    let ens = ctsim::simulate_ensemble(&m, control.as_ref(), spec.particles, seed)?;
    Ok((m, ens))
}

pub fn ct_simulate(g: &GlobalArgs, path: &Path) -> Result<Outcome> {
    let (sc, seed, mut run) = start(g, path, "ct simulate")?;
    let (_, ens) = simulate(&sc, seed)?;
    let table = PathTable {
        times: ens.times.clone(),
        w0: ens.w0.w0.clone(),
        n_particles: ens.n_particles,
        states: ens.states.clone(),
    };
    run.write("paths.csv", table.to_csv())?;
    if sc.ct_spec()?.binary_paths {
        let mut buf = Vec::new();
        table.write_binary(&mut buf)?;
        run.write("paths.bin", buf)?;
    }
    let last = ens.cross_section(ens.n_times() - 1);
    let ms = crossmfg::stats::mean_se(&last);
    run.write_json(
        "summary.json",
        &json!({ "particles": ens.n_particles, "times": ens.n_times(), "terminal_mean": ms.mean, "terminal_se": ms.se }),
    )?;
    println!("terminal mean state = {} (se {})", ms.mean, ms.se);
    run.finish(None)?;
    Ok(Outcome::Success)
}

pub fn ct_nip_check(g: &GlobalArgs, path: &Path) -> Result<Outcome> {
    let (sc, seed, mut run) = start(g, path, "ct nip-check")?;
    let (_, ens) = simulate(&sc, seed)?;
    let rep = ctsim::estimate_nip(&ens.drift, &ens.common_vol, ens.n_particles, ens.n_times())?;
    let mut t = CsvTable::new(&["t", "lambda_hat", "residual", "stderr"]);
    let opt = |v: Option<f64>| fmt_num(v.unwrap_or(f64::NAN));
    for k in 0..ens.n_times() {
        t.push(vec![
            fmt_num(ens.times[k]),
            opt(rep.lambda_hat[k]),
            opt(rep.residual_by_time[k]),
            opt(rep.stderr[k]),
        ]);
    }
    run.write("nip.csv", t.to_csv())?;
    let undefined: Vec<f64> = rep.undefined.iter().map(|k| ens.times[*k]).collect();
    run.write_json(
        "summary.json",
        &json!({
            "verdict": rep.verdict,
            "residual_norm": rep.residual_norm,
            "tolerance": rep.tolerance,
            "undefined_times": undefined,
        }),
    )?;
    println!("residual norm = {:e}, tolerance = {:e}", rep.residual_norm, rep.tolerance);
    match rep.verdict {
        NipVerdict::Proportional => {
            run.finish(None)?;
            Ok(Outcome::Success)
        }
        NipVerdict::Violated => verdict(
            run,
            "nip-violated",
            format!("residual norm {:e} exceeds {:e}", rep.residual_norm, rep.tolerance),
        ),
    }
}

pub fn ct_map_control(g: &GlobalArgs, path: &Path) -> Result<Outcome> {
    let (sc, seed, mut run) = start(g, path, "ct map-control")?;
    let (m, ens) = simulate(&sc, seed)?;
    let spec = sc.ct_spec()?;
    let env = EnvironmentTable::from_ensemble(&ens);
    let cross = spec.cross_holding.clone();
    let mut header = vec!["t", "particle", "state", "alpha", "beta_f", "pi"];
    if cross.is_some() {
        header.push("alpha_from_beta");
    }
    let mut t = CsvTable::new(&header);
    let mut pi_missing = 0usize;
    for k in 0..ens.n_times() {
        let c = m.coefficients(k, ens.w0.w0[k]);
        let e = env.at(k);
        let sigma0_x: Vec<f64> = e.states.iter().map(|x| c.sigma0 * x).collect();
        let pi = match ctsim::pi_from_alpha(e.common_vol, &sigma0_x, c.kappa) {
            Ok(p) => Some(p),
            Err(CtError::Precondition(msg)) => {
                log::debug!("no holding kernel at t = {}: {msg}", ens.times[k]);
                pi_missing += 1;
                None
            }
            Err(err) => return Err(err.into()),
        };
        let mult = 1.0 / (1.0 + c.kappa);
        for p in 0..ens.n_particles {
            let x = e.states[p];
            let alpha = e.common_vol[p];
            let slice = ctsim::beta_from_alpha(&e, mult, sigma0_x[p], alpha)?;
            let mut row = vec![
                fmt_num(ens.times[k]),
                p.to_string(),
                fmt_num(x),
                fmt_num(alpha),
                fmt_num(slice.f),
                fmt_num(pi.as_ref().map_or(f64::NAN, |v| v[p])),
            ];
            if let Some(ch) = &cross {
                let kappa = ch.kappa;
                let pi_k = move |_: f64, _: f64| kappa;
                let beta_k = |a: f64, b: f64| ch.beta_base + ch.beta_amplitude * (b - a).tanh();
                let a = ctsim::reduced_from_beta(&e, &pi_k, &beta_k, sigma0_x[p], x)?;
                row.push(fmt_num(a));
            }
            t.push(row);
        }
    }
    run.write("map.csv", t.to_csv())?;
    run.write_json(
        "summary.json",
        &json!({ "times": ens.n_times(), "particles": ens.n_particles, "times_without_kernel": pi_missing }),
    )?;
    run.finish(None)?;
    Ok(Outcome::Success)
}

fn write_grid(run: &mut Run, m: &CtModel, sc: &Scenario, utility: Utility, seed: u64) -> Result<Option<f64>> {
    let Some(spec) = sc.bsde.as_ref() else { return Ok(None) };
    let Some(grid) = spec.grid.as_ref() else { return Ok(None) };
    let rows = bsde::grid_search(m, utility, &grid.points(), spec.grid_paths, seed)?;
    let mut t = CsvTable::new(&["a", "objective", "se"]);
    for r in &rows {
        t.push_nums(&[r.a, r.objective, r.stderr]);
    }
    run.write("grid_search.csv", t.to_csv())?;
    Ok(bsde::grid_maximizer(&rows))
}

fn write_equilibrium(run: &mut Run, eq: &bsde::EquilibriumCt) -> Result<()> {
    let mut t = CsvTable::new(&["t", "lambda", "required_sigma0", "hat_a", "kappa"]);
    for k in 0..eq.times.len() {
        t.push_nums(&[
            eq.times[k],
            eq.lambda.column(k).mean(),
            eq.required_sigma0.column(k).mean(),
            eq.hat_a.column(k).mean(),
            eq.kappa.column(k).mean(),
        ]);
    }
    run.write("equilibrium.csv", t.to_csv())
}

fn write_bsde(run: &mut Run, sol: &bsde::BsdeSolution) -> Result<()> {
    let mut t = CsvTable::new(&["t", "y_mean", "y_sd", "z_mean"]);
    for (time, y, sd, z) in sol.summary() {
        t.push_nums(&[time, y, sd, z]);
    }
    run.write("bsde.csv", t.to_csv())
}

pub fn ct_equilibrium(g: &GlobalArgs, path: &Path) -> Result<Outcome> {
    let (sc, seed, mut run) = start(g, path, "ct equilibrium")?;
    let spec = sc.ct_spec()?;
    let m = spec.build()?;
    let utility = match (g.utility, m.p) {
        (Some(UtilityArg::Log), _) | (None, None) => Utility::Log,
        (Some(UtilityArg::Power), Some(p)) | (None, Some(p)) => Utility::Power(p),
        (Some(UtilityArg::Power), None) => bail!("power utility requires ct.p in the scenario"),
    };
    let eq = match utility {
        Utility::Log => {
            let m_log = CtModel { p: None, ..m.clone() };
            match bsde::log_equilibrium(&m_log, spec.particles, seed) {
                Ok(eq) => eq,
                Err(e @ BsdeError::NoEquilibrium { .. }) => return verdict(run, "no-equilibrium", e),
                Err(e) => return Err(e.into()),
            }
        }
        Utility::Power(_) => {
            let bs = sc.bsde.clone().ok_or_else(|| anyhow!("power utility requires a [bsde] section"))?;
            let sol = bsde::solve_qbsde_with(&m, bs.paths, seed, bs.scheme())?;
            write_bsde(&mut run, &sol)?;
            match bsde::power_equilibrium(&m, &sol) {
                Ok(eq) => eq,
                Err(e @ BsdeError::NoEquilibrium { .. }) => return verdict(run, "no-equilibrium", e),
                Err(e) => return Err(e.into()),
            }
        }
    };
    write_equilibrium(&mut run, &eq)?;
    let maximizer = write_grid(&mut run, &m, &sc, utility, seed)?;
    let hat_a0 = eq.hat_a.column(0).mean();
    run.write_json(
        "summary.json",
        &json!({
            "kind": eq.kind,
            "hat_a_at_0": hat_a0,
            "max_deviation": eq.max_deviation,
            "grid_maximizer": maximizer,
        }),
    )?;
    println!("equilibrium: hat_a(0) = {hat_a0}");
    if let Some(a) = maximizer {
        println!("grid maximizer = {a}");
    }
    run.finish(None)?;
    Ok(Outcome::Success)
}

pub fn bsde_solve(g: &GlobalArgs, path: &Path) -> Result<Outcome> {
    let (sc, seed, mut run) = start(g, path, "bsde solve")?;
    let m = sc.ct_model()?;
    let bs = sc.bsde.clone().ok_or_else(|| anyhow!("scenario has no [bsde] section"))?;
    let sol = bsde::solve_qbsde_with(&m, bs.paths, seed, bs.scheme())?;
    write_bsde(&mut run, &sol)?;
    run.write_json(
        "summary.json",
        &json!({
            "y0": sol.y0(),
            "terminal_residual": sol.terminal_residual,
            "step_residual": sol.step_residual,
            "moment_gate": sol.gate.estimate,
            "moment_gate_passed": sol.gate.passed,
        }),
    )?;
    println!("Y0 = {}", sol.y0());
    run.finish(None)?;
    Ok(Outcome::Success)
}

/// Series extracted from a run CSV: `(file, series, x column, value column,
/// stderr column)`.
const PLOT_SOURCES: [(&str, &str, &str, &str, Option<&str>); 4] = [
    ("convergence.csv", "n-convergence", "N", "wasserstein_error", Some("stderr")),
    ("nip.csv", "lambda-hat", "t", "lambda_hat", Some("stderr")),
    ("grid_search.csv", "grid-objective", "a", "objective", Some("se")),
    ("bsde.csv", "y-mean", "t", "y_mean", None),
];

pub fn emit_plot_data(_g: &GlobalArgs, dir: &Path) -> Result<Outcome> {
    let mut out = CsvTable::new(&["series", "x", "value", "stderr"]);
    let mut found = 0;
    for (file, series, xc, vc, sc) in PLOT_SOURCES {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        found += 1;
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| *h == name)
                .ok_or_else(|| anyhow!("{} has no column {name}", path.display()))
        };
        let (xi, vi) = (col(xc)?, col(vc)?);
        let si = sc.map(col).transpose()?;
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            let se = si.map_or_else(|| fmt_num(f64::NAN), |i| cells[i].to_string());
            out.push(vec![series.to_string(), cells[xi].to_string(), cells[vi].to_string(), se]);
        }
    }
    if found == 0 {
        bail!("no run CSVs found in {}", dir.display());
    }
    let target = dir.join("plot_data.csv");
    fs::write(&target, out.to_csv()).with_context(|| format!("writing {}", target.display()))?;
    println!("wrote {}", target.display());
    Ok(Outcome::Success)
}
