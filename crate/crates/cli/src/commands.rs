//! One function per subcommand. Each reads its blocks, applies flag overrides,
//! runs, and writes CSV or JSON.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use aeblow_core::entire_solutions::{log_envelope, EigenOptions, EigenSolver, RadialGrid};
use aeblow_core::lifespan::{critical_exponent, ensure_subcritical, fit_records, geometric_grid, sweep as run_sweep, LifespanConfig};
use aeblow_core::metric::validate_long_range;
use aeblow_core::ode_lab::{backward_comparison, forward_comparison, kato_sweep, KatoProblem};
use aeblow_core::testfn_critical::{
    critical_functionals, critical_q, slicing_iteration_check, xi_bounds_check, BoundReport, CriticalReport,
    IterationReport, SlicingConstants, XiEvaluator,
};
use aeblow_core::wave_solver::{
    Sample, SnapshotWriter, SolverConfig, StepStatus, TestFunction, WaveSolver, BLOWUP_LEVELS,
};
use serde::Serialize;

use crate::config::{block, AutoPower, ExperimentConfig, PowerChoice};
use crate::{CliError, Common, OdeStudy};

type Out = Box<dyn Write>;

fn open_out(flag: &Option<PathBuf>, configured: &Option<PathBuf>) -> Result<Out, CliError> {
    match flag.as_ref().or(configured.as_ref()) {
        Some(p) => Ok(Box::new(BufWriter::new(create(p)?))),
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
    }
}

fn create(p: &Path) -> Result<File, CliError> {
    File::create(p).map_err(|e| CliError::Io(format!("cannot create {}: {e}", p.display())))
}

fn write_json<T: Serialize>(out: &mut Out, value: &T) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn positive(what: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("`{what}` = {v} must be positive")))
    }
}

pub fn validate(common: &Common) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let profile = cfg.metric()?;
    let v = block(&cfg.validate, "validate")?;
    positive("validate.r_max", v.r_max)?;
    if v.points < 3 {
        return Err(CliError::Config("`validate.points` must be at least 3".into()));
    }
    let grid: Vec<f64> = (0..v.points).map(|i| v.r_max * i as f64 / (v.points - 1) as f64).collect();
    let report = validate_long_range(&profile, &grid).map_err(CliError::from_setup)?;
    let mut out = open_out(&common.out, &v.out)?;
    write_json(&mut out, &report)?;
    if !report.pass {
        return Err(CliError::Invariant(format!("validation failed: {}", report.failures.join("; "))));
    }
    Ok(())
}

pub fn eigen(common: &Common, lambda: Option<Vec<f64>>, rmax: Option<f64>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let profile = cfg.metric()?;
    let e = block(&cfg.eigen, "eigen")?;
    let lambdas = lambda.unwrap_or_else(|| e.lambda.clone());
    if lambdas.is_empty() {
        return Err(CliError::Config("`eigen.lambda` is empty".into()));
    }
    let solver = EigenSolver::new(profile.clone(), EigenOptions::default()).map_err(CliError::from_setup)?;
    let mut w = csv::Writer::from_writer(open_out(&common.out, &e.out)?);
    w.write_record(["lambda", "r", "Phi", "dPhi", "E", "ratio"])?;
    for &lam in &lambdas {
        positive("eigen.lambda", lam)?;
        let r_max = rmax.or(e.r_max).unwrap_or(50.0 / lam);
        let grid = match e.dr {
            Some(dr) => RadialGrid::new(dr, r_max),
            None => RadialGrid::for_lambda(lam, r_max),
        }
        .map_err(CliError::from_setup)?;
        let sol = solver.build(lam, grid).map_err(CliError::from_run)?;
        for i in 0..sol.len() {
            let r = sol.r(i);
            let k_int = profile.k_integral(r).map_err(CliError::from_run)?;
            let log_e = log_envelope(&profile, lam, r, k_int);
            w.write_record([
                num(lam),
                num(r),
                num(sol.phi(i)),
                num(sol.dphi(i)),
                num(log_e.exp()),
                num((sol.log_phi[i] - log_e).exp()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn ode(study: &OdeStudy) -> Result<(), CliError> {
    match study {
        OdeStudy::Kato { common } => kato(common),
        OdeStudy::Comparison { common } => comparison(common),
    }
}

#[derive(Serialize)]
struct KatoFit {
    slope: f64,
    ci: (f64, f64),
    predicted: f64,
    ratio: f64,
    r_squared: f64,
    points: usize,
}

fn kato(common: &Common) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let k = block(&cfg.ode, "ode")?;
    let k = block(&k.kato, "ode.kato")?;
    let template = KatoProblem::new(k.a, k.alpha, k.beta, 1.0, k.k, 1.0).map_err(CliError::from_setup)?;
    for &d in &k.deltas {
        positive("ode.kato.deltas", d)?;
    }
    let sweep = kato_sweep(&template, &k.deltas, k.tol).map_err(CliError::from_run)?;
    let mut w = csv::Writer::from_writer(open_out(&common.out, &k.out)?);
    w.write_record(["delta", "t_blowup", "crossing_1", "crossing_2", "crossing_3", "gap_ratio"])?;
    for p in &sweep.points {
        w.write_record([
            num(p.delta),
            num(p.t_blowup),
            num(p.crossings[0]),
            num(p.crossings[1]),
            num(p.crossings[2]),
            num(p.gap_ratio),
        ])?;
    }
    w.flush()?;
    if let Some(path) = &k.fit_out {
        let fit = KatoFit {
            slope: sweep.fit.slope,
            ci: sweep.fit.slope_ci,
            predicted: sweep.predicted,
            ratio: sweep.fit.slope / sweep.predicted,
            r_squared: sweep.fit.r_squared,
            points: sweep.fit.points,
        };
        let mut out: Out = Box::new(BufWriter::new(create(path)?));
        write_json(&mut out, &fit)?;
    }
    Ok(())
}

fn comparison(common: &Common) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let damping = cfg.damping()?;
    let c = block(&cfg.ode, "ode")?;
    let c = block(&c.comparison, "ode.comparison")?;
    positive("ode.comparison.t", c.t)?;
    if c.samples == 0 {
        return Err(CliError::Config("`ode.comparison.samples` must be positive".into()));
    }
    let mut w = csv::Writer::from_writer(open_out(&common.out, &c.out)?);
    w.write_record(["lambda", "direction", "t", "y", "dy", "eta"])?;
    for &lam in &c.lambda {
        positive("ode.comparison.lambda", lam)?;
        for sol in [
            forward_comparison(&damping, lam, c.t, c.samples).map_err(CliError::from_run)?,
            backward_comparison(&damping, lam, c.t, c.samples).map_err(CliError::from_run)?,
        ] {
            if !sol.positive {
                return Err(CliError::Invariant(format!(
                    "comparison solution for lambda = {lam} ({:?}) is not positive",
                    sol.direction
                )));
            }
            let dir = format!("{:?}", sol.direction).to_lowercase();
            for i in 0..sol.t.len() {
                w.write_record([num(lam), dir.clone(), num(sol.t[i]), num(sol.y[i]), num(sol.dy[i]), num(sol.eta[i])])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub struct SolveOverrides {
    pub eps: Option<f64>,
    pub p: Option<f64>,
    pub dr: Option<f64>,
    pub tmax: Option<f64>,
}

fn solver_config(cfg: &ExperimentConfig, p: Option<f64>, dr: Option<f64>, tmax: Option<f64>) -> Result<SolverConfig, CliError> {
    let base = cfg.solver()?;
    Ok(SolverConfig {
        p: p.unwrap_or(base.p),
        dr: dr.unwrap_or(base.dr),
        t_max: tmax.unwrap_or(base.t_max),
        ..base
    })
}

pub fn solve(common: &Common, o: SolveOverrides) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let profile = cfg.metric()?;
    let damping = cfg.damping()?;
    let data = cfg.data()?;
    let s = block(&cfg.solve, "solve")?;
    let solver_cfg = solver_config(&cfg, o.p, o.dr, o.tmax)?;
    let eps = o.eps.unwrap_or(s.eps);
    if s.sample_every == 0 {
        return Err(CliError::Config("`solve.sample_every` must be positive".into()));
    }
    let (solver, mut state) =
        WaveSolver::init(&profile, &damping, data, eps, solver_cfg).map_err(CliError::from_setup)?;
    let phi = s
        .lambda
        .map(|l| TestFunction::new(&solver, l))
        .transpose()
        .map_err(CliError::from_setup)?;
    let mut snapshots = match &s.snapshots {
        Some(p) => Some(SnapshotWriter::new(BufWriter::new(create(p)?), profile.n, solver.count(), solver.dr)?),
        None => None,
    };
    let mut w = csv::Writer::from_writer(open_out(&common.out, &s.out)?);
    w.write_record(["t", "F", "F_second", "H", "G", "sup_u", "support_edge"])?;
    let mut record = |state: &_, w: &mut csv::Writer<Out>| -> Result<(), CliError> {
        solver.check_support(state).map_err(CliError::from_run)?;
        let x: Sample = solver.sample(state, phi.as_ref()).map_err(CliError::from_run)?;
        w.write_record([num(x.t), num(x.f), num(x.f_second), opt(x.h), opt(x.g), num(x.sup_u), num(x.support_edge)])?;
        if let Some(snap) = snapshots.as_mut() {
            snap.write_frame(state)?;
        }
        Ok(())
    };
    record(&state, &mut w)?;
    let s_end = solver.clock_of(solver_cfg.t_max).map_err(CliError::from_run)?;
    let blowup_level = BLOWUP_LEVELS[2] * eps;
    let mut stopped = "budget exhausted";
    while state.s < s_end * (1.0 - 1e-14) {
        let dt = solver.stable_dt(&state).map_err(CliError::from_run)?.min(s_end - state.s);
        if solver.step(&mut state, dt).map_err(CliError::from_run)? == StepStatus::NonFinite {
            stopped = "non-finite values";
            break;
        }
        if s.detect_blowup && eps > 0.0 && state.sup_abs() >= blowup_level {
            stopped = "blow-up level reached";
            break;
        }
        if state.steps % s.sample_every == 0 {
            record(&state, &mut w)?;
        }
    }
    if state.steps % s.sample_every != 0 && stopped != "non-finite values" {
        record(&state, &mut w)?;
    }
    w.flush()?;
    if let Some(snap) = snapshots {
        snap.into_inner().flush()?;
    }
    eprintln!("aeblow solve: stopped at t = {} after {} steps ({stopped})", state.t, state.steps);
    Ok(())
}

pub fn sweep(common: &Common, eps_start: Option<f64>, eps_count: Option<usize>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let profile = cfg.metric()?;
    let s = block(&cfg.sweep, "sweep")?;
    let solver = cfg.solver()?;
    ensure_subcritical(profile.n, solver.p).map_err(CliError::from_setup)?;
    let start = positive("sweep.eps_start", eps_start.unwrap_or(s.eps_start))?;
    let count = eps_count.unwrap_or(s.eps_count);
    if count == 0 || !(s.eps_ratio > 1.0) {
        return Err(CliError::Config("`sweep.eps_count` must be positive and `sweep.eps_ratio` above 1".into()));
    }
    let lcfg = LifespanConfig {
        profile,
        damping: cfg.damping()?,
        data: cfg.data()?,
        solver,
        refine: s.refine,
    };
    let eps = geometric_grid(start, s.eps_ratio, count);
    let records = run_sweep(&lcfg, &eps).map_err(CliError::from_run)?;
    let mut w = csv::Writer::from_writer(open_out(&common.out, &s.out)?);
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;
    if let Some(path) = &s.fit_out {
        let fit = fit_records(&records, lcfg.profile.n, lcfg.solver.p, lcfg.data.shape).map_err(CliError::from_run)?;
        let mut out: Out = Box::new(BufWriter::new(create(path)?));
        write_json(&mut out, &fit)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CriticalOutput {
    n: usize,
    p: f64,
    q: f64,
    eps: f64,
    bounds: BoundReport,
    functionals: CriticalReport,
    iteration: Option<IterationReport>,
}

pub fn critical(common: &Common, eps: Option<f64>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let profile = cfg.metric()?;
    let damping = cfg.damping()?;
    let data = cfg.data()?;
    let c = block(&cfg.critical, "critical")?;
    let n = profile.n;
    let p = match c.p {
        PowerChoice::Value(v) => v,
        PowerChoice::Name(AutoPower::Auto) => critical_exponent(n).map_err(CliError::from_setup)?,
    };
    let q = critical_q(n, p).map_err(CliError::from_setup)?;
    let eps = eps.unwrap_or(c.eps);
    let t_end = positive("critical.t_end", c.t_end)?;
    let dt = positive("critical.dt", c.dt)?;
    let window = c.window.unwrap_or([2.0, t_end]);
    if !(window[0] < window[1]) {
        return Err(CliError::Config("`critical.window` must be increasing".into()));
    }
    // The solver's radial grid must hold the cone at t_end and at twice the largest bound time.
    let bound_max = c.bound_times.iter().copied().fold(0.0, f64::max);
    let base = cfg.solver()?;
    let reach = damping.eta_of_s(t_end.max(2.0 * bound_max)).map_err(CliError::from_setup)? + data.r0;
    let solver_cfg = SolverConfig {
        p,
        t_max: t_end,
        r_max: Some(base.r_max.unwrap_or(0.0).max(reach + 2.0)),
        ..base
    };
    let (solver, mut state) =
        WaveSolver::init(&profile, &damping, data, eps, solver_cfg).map_err(CliError::from_setup)?;
    let ev = XiEvaluator::for_solver(&solver, q, c.lambda_grid).map_err(CliError::from_setup)?;
    let bounds = xi_bounds_check(&ev, &c.bound_times, &[0.0, 0.25, 0.5, 0.75, 0.95], &[0.0, 0.5, 0.9])
        .map_err(CliError::from_run)?;
    let steps = (t_end / dt).round() as usize;
    let clock: Vec<f64> = (0..=steps).map(|k| t_end * k as f64 / steps as f64).collect();
    let functionals =
        critical_functionals(&solver, &mut state, &ev, &clock, (window[0], window[1])).map_err(CliError::from_run)?;
    // The iteration runs on the measured constants when F stays positive on the window.
    let (ts, fs): (Vec<f64>, Vec<f64>) = functionals
        .samples
        .iter()
        .filter(|s| s.t >= window[0] && s.t <= window[1])
        .map(|s| (s.t, s.f))
        .unzip();
    let iteration = if eps > 0.0 && ts.len() >= 2 && fs.iter().all(|f| *f > 0.0) {
        let probe = SlicingConstants { p, eps, c1: 1.0, c2: 1.0 };
        let first = slicing_iteration_check(&ts, &fs, &probe, 12).map_err(CliError::from_run)?;
        match (first.measured_c1, first.measured_c2) {
            (Some(c1), Some(c2)) if c1 > 0.0 && c2 > 0.0 => {
                let measured = SlicingConstants { p, eps, c1, c2 };
                Some(slicing_iteration_check(&ts, &fs, &measured, 12).map_err(CliError::from_run)?)
            }
            _ => Some(first),
        }
    } else {
        None
    };
    let report = CriticalOutput {
        n,
        p,
        q,
        eps,
        bounds,
        functionals,
        iteration,
    };
    let mut out = open_out(&common.out, &c.out)?;
    write_json(&mut out, &report)?;
    if !report.bounds.stable {
        return Err(CliError::Invariant("comparison-function bounds are not stable under refinement".into()));
    }
    Ok(())
}
