//! Blow-up times of the radial solver and power-law fits of `T(ε)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::damping::DampingProfile;
use crate::error::{Error, Result};
use crate::metric::MetricProfile;
use crate::stats::{linear_fit, LinearFit};
use crate::wave_solver::{
    DataProfile, DataShape, RunOptions, RunOutcome, Sampling, SolverConfig, TestFunction, Trajectory,
    WaveSolver, BLOWUP_LEVELS,
};

/// Positive root of `(n−1)p² − (n+1)p − 2 = 0`.
pub fn critical_exponent(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::domain("n", n as f64, "dimension must be at least 2"));
    }
    let (a, b) = ((n - 1) as f64, (n + 1) as f64);
    Ok((b + (b * b + 8.0 * a).sqrt()) / (2.0 * a))
}

/// Exponent of `ε` in the subcritical lifespan bound, `2p(p−1)/((n−1)p² − (n+1)p − 2)`.
pub fn theory_exponent(n: usize, p: f64) -> Result<f64> {
    let pc = critical_exponent(n)?;
    if !(p > 1.0 && p < pc) {
        return Err(Error::domain("p", p, "the power-law lifespan needs 1 < p < p_c(n)"));
    }
    let nf = n as f64;
    Ok(2.0 * p * (p - 1.0) / ((nf - 1.0) * p * p - (nf + 1.0) * p - 2.0))
}

/// Exponent `−(p−1)/(3−p)` of the sharper bound for `n = 2`, `p < 2`, `u₁ ≠ 0`.
pub fn special_exponent(p: f64) -> Result<f64> {
    if !(p > 1.0 && p < 2.0) {
        return Err(Error::domain("p", p, "the two-dimensional bound needs 1 < p < 2"));
    }
    Ok(-(p - 1.0) / (3.0 - p))
}

/// Refuse direct lifespan sweeps at or above the critical power, where the
/// lifespan is exponential in `ε^{−p(p−1)}` and out of reach.
pub fn ensure_subcritical(n: usize, p: f64) -> Result<()> {
    let pc = critical_exponent(n)?;
    if p >= pc - 1e-12 {
        return Err(Error::Configuration(format!(
            "p = {p} is not below p_c({n}) = {pc}; a direct sweep cannot reach the lifespan, \
             use the critical-case checks instead"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LifespanConfig {
    pub profile: MetricProfile,
    pub damping: DampingProfile,
    pub data: DataProfile,
    pub solver: SolverConfig,
    /// Repeat every blow-up run at `Δr/2` and report the relative change of `T`.
    pub refine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LifespanRecord {
    pub n: usize,
    pub p: f64,
    pub eps: f64,
    pub metric: String,
    pub damping: String,
    pub shape: DataShape,
    pub r0: f64,
    pub outcome: RunOutcome,
    /// Extrapolated blow-up time; absent when the budget ran out first.
    pub t_detected: Option<f64>,
    pub level_low: f64,
    pub level_high: f64,
    pub crossing_1: Option<f64>,
    pub crossing_2: Option<f64>,
    pub crossing_3: Option<f64>,
    pub dr: f64,
    pub cfl: f64,
    pub t_max: f64,
    pub steps: usize,
    pub refinements: u32,
    pub t_refined: Option<f64>,
    /// `|T(Δr/2) − T(Δr)| / T(Δr/2)`.
    pub refinement_change: Option<f64>,
}

impl LifespanRecord {
    pub fn blew_up(&self) -> bool {
        self.t_detected.is_some()
    }
}

fn t_detected(traj: &Trajectory) -> Option<f64> {
    match (traj.blowup, traj.outcome) {
        (Some(b), _) => Some(b.t_blowup),
        // The solution left the float range before the last level was crossed.
        (None, RunOutcome::NonFinite | RunOutcome::StepCollapse) => Some(traj.t_end),
        _ => None,
    }
}

/// One evolution with blow-up levels armed, optionally sampling the functionals
/// (including `H` and `G` when `lambda1` is given).
pub fn run_lifespan(
    cfg: &LifespanConfig,
    eps: f64,
    dr: f64,
    sampling: Sampling,
    lambda1: Option<f64>,
) -> Result<(LifespanRecord, Trajectory)> {
    let solver_cfg = SolverConfig { dr, ..cfg.solver };
    let (solver, mut state) = WaveSolver::init(&cfg.profile, &cfg.damping, cfg.data, eps, solver_cfg)?;
    let phi = lambda1.map(|l| TestFunction::new(&solver, l)).transpose()?;
    let opts = RunOptions {
        sampling,
        blowup_levels: Some(BLOWUP_LEVELS),
        test_function: phi.as_ref(),
    };
    let traj = solver.run(&mut state, &opts)?;
    let c = |k: usize| traj.crossings.get(k).copied();
    let record = LifespanRecord {
        outcome: traj.outcome,
        t_detected: t_detected(&traj),
        crossing_1: c(0),
        crossing_2: c(1),
        crossing_3: c(2),
        steps: traj.steps,
        ..base_record(cfg, eps, dr)
    };
    Ok((record, traj))
}

fn base_record(cfg: &LifespanConfig, eps: f64, dr: f64) -> LifespanRecord {
    LifespanRecord {
        n: cfg.profile.n,
        p: cfg.solver.p,
        eps,
        metric: cfg.profile.name.clone(),
        damping: cfg.damping.label(),
        shape: cfg.data.shape,
        r0: cfg.data.r0,
        outcome: RunOutcome::BudgetExhausted,
        t_detected: None,
        level_low: BLOWUP_LEVELS[0],
        level_high: BLOWUP_LEVELS[2],
        crossing_1: None,
        crossing_2: None,
        crossing_3: None,
        dr,
        cfl: cfg.solver.cfl,
        t_max: cfg.solver.t_max,
        steps: 0,
        refinements: 0,
        t_refined: None,
        refinement_change: None,
    }
}

/// Blow-up time for amplitude `ε`, cross-checked at `Δr/2` when configured.
pub fn detect_blowup(cfg: &LifespanConfig, eps: f64) -> Result<LifespanRecord> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::domain("eps", eps, "amplitude must be nonnegative"));
    }
    let dr = cfg.solver.dr;
    if eps == 0.0 {
        // The zero solution never blows up; only the configuration is checked.
        WaveSolver::init(&cfg.profile, &cfg.damping, cfg.data, 0.0, cfg.solver)?;
        return Ok(base_record(cfg, 0.0, dr));
    }
    let (mut record, _) = run_lifespan(cfg, eps, dr, Sampling::Ends, None)?;
    if cfg.refine {
        if let Some(t) = record.t_detected {
            let (fine, _) = run_lifespan(cfg, eps, dr / 2.0, Sampling::Ends, None)?;
            record.refinements = 1;
            record.t_refined = fine.t_detected;
            record.refinement_change = fine.t_detected.map(|tf| (tf - t).abs() / tf);
        }
    }
    Ok(record)
}

/// `start, start/ratio, start/ratio², …` (`count` values).
pub fn geometric_grid(start: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| start / ratio.powi(k as i32)).collect()
}

/// Largest `ε` of the sequence `eps_hi/ratioᵏ` whose blow-up time is at least
/// `min_t`, so that sweeps start past the immediate blow-up regime.
pub fn find_start_eps(cfg: &LifespanConfig, eps_hi: f64, ratio: f64, min_t: f64, max_tries: usize) -> Result<f64> {
    let probe = LifespanConfig {
        refine: false,
        ..cfg.clone()
    };
    let mut eps = eps_hi;
    for _ in 0..max_tries {
        let rec = detect_blowup(&probe, eps)?;
        match rec.t_detected {
            Some(t) if t >= min_t => return Ok(eps),
            Some(_) => eps /= ratio,
            None => {
                return Err(Error::NoBlowup(probe.solver.t_max));
            }
        }
    }
    Err(Error::InsufficientData(format!(
        "no amplitude below {eps_hi} in {max_tries} tries reached T >= {min_t}"
    )))
}

/// Records for each `ε`, computed in parallel and returned in the order given.
pub fn sweep(cfg: &LifespanConfig, eps: &[f64]) -> Result<Vec<LifespanRecord>> {
    ensure_subcritical(cfg.profile.n, cfg.solver.p)?;
    eps.par_iter().map(|&e| detect_blowup(cfg, e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub slope: f64,
    pub ci: (f64, f64),
    pub intercept: f64,
    pub r_squared: f64,
    pub theory: f64,
    /// `slope / theory`.
    pub ratio: f64,
    /// `−(p−1)/(3−p)` when `n = 2`, `p < 2` and the data carry `u₁`.
    pub special: Option<f64>,
    pub special_ratio: Option<f64>,
    pub points: usize,
    pub decades: f64,
    /// `T` nonincreasing as `ε` grows.
    pub monotone: bool,
    /// Quadratic coefficient of `log T` against `log ε`.
    pub curvature: f64,
    /// The quadratic term moves the fit less than twice the slope's 95%
    /// half-width does over the sampled range.
    pub curvature_ok: bool,
}

/// Least-squares fit of `log T` against `log ε` over the blow-up records.
pub fn fit_records(records: &[LifespanRecord], n: usize, p: f64, shape: DataShape) -> Result<FitReport> {
    let mut pts: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.t_detected.map(|t| (r.eps, t)))
        .collect();
    if pts.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "a lifespan fit needs at least 5 blow-up records, got {}",
            pts.len()
        )));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let x: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let decades = (pts[pts.len() - 1].0 / pts[0].0).log10();
    if decades < 1.5 - 1e-9 {
        return Err(Error::InsufficientData(format!(
            "amplitudes span {decades:.3} decades; at least 1.5 are needed"
        )));
    }
    let fit: LinearFit = linear_fit(&x, &y)?;
    let theory = theory_exponent(n, p)?;
    let special = (n == 2 && p < 2.0 && shape != DataShape::U0)
        .then(|| special_exponent(p))
        .transpose()?;
    let monotone = pts.windows(2).all(|w| w[1].1 <= w[0].1);
    let half_range = 0.5 * (x[x.len() - 1] - x[0]);
    let half_ci = 0.5 * (fit.slope_ci.1 - fit.slope_ci.0);
    Ok(FitReport {
        slope: fit.slope,
        ci: fit.slope_ci,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        theory,
        ratio: fit.slope / theory,
        special,
        special_ratio: special.map(|s| fit.slope / s),
        points: pts.len(),
        decades,
        monotone,
        curvature: fit.curvature,
        // The absolute floor admits exact power laws, whose interval is round-off.
        curvature_ok: fit.curvature.abs() * half_range * half_range
            <= 2.0 * half_ci * half_range + 1e-9,
    })
}

pub fn sweep_and_fit(cfg: &LifespanConfig, eps: &[f64]) -> Result<(Vec<LifespanRecord>, FitReport)> {
    let records = sweep(cfg, eps)?;
    let report = fit_records(&records, cfg.profile.n, cfg.solver.p, cfg.data.shape)?;
    Ok((records, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn flat_config(n: usize, p: f64, shape: DataShape, dr: f64, t_max: f64) -> LifespanConfig {
        LifespanConfig {
            profile: MetricProfile::flat(n).unwrap(),
            damping: DampingProfile::zero(),
            data: DataProfile::new(shape, 1.0).unwrap(),
            solver: SolverConfig {
                dr,
                p,
                t_max,
                ..SolverConfig::default()
            },
            refine: false,
        }
    }

    fn synthetic(eps: &[f64], t: impl Fn(f64) -> f64) -> Vec<LifespanRecord> {
        let cfg = flat_config(3, 2.0, DataShape::Both, 0.1, 10.0);
        eps.iter()
            .map(|&e| LifespanRecord {
                t_detected: Some(t(e)),
                ..base_record(&cfg, e, 0.1)
            })
            .collect()
    }

    #[test]
    fn critical_exponents() {
        // p_c(3) = 1 + √2.
        assert_relative_eq!(critical_exponent(3).unwrap(), 1.0 + 2f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(critical_exponent(2).unwrap(), (3.0 + 17f64.sqrt()) / 2.0, max_relative = 1e-15);
        // 3p² − 5p − 2 = (3p + 1)(p − 2).
        assert_relative_eq!(critical_exponent(4).unwrap(), 2.0, max_relative = 1e-15);
        assert!(critical_exponent(1).is_err());
    }

    proptest! {
        #[test]
        fn critical_exponent_solves_quadratic(n in 2usize..40) {
            let p = critical_exponent(n).unwrap();
            let nf = n as f64;
            prop_assert!(((nf - 1.0) * p * p - (nf + 1.0) * p - 2.0).abs() < 1e-12 * p * p * nf);
            prop_assert!(p > 1.0);
        }

        #[test]
        fn fit_slope_ignores_amplitude_units(c in 0.1f64..100.0, k in 1.0f64..3.0, noise in 0.0f64..0.05) {
            let eps = geometric_grid(1.0, 10f64.powf(0.25), 7);
            let recs = synthetic(&eps, |e| c * e.powf(-k) * (1.0 + noise * (e * 7.0).sin()));
            let fit = fit_records(&recs, 3, 2.0, DataShape::Both).unwrap();
            let mut relabeled = recs.clone();
            for r in &mut relabeled {
                r.eps *= 2.0;
            }
            let fit2 = fit_records(&relabeled, 3, 2.0, DataShape::Both).unwrap();
            prop_assert!((fit.slope - fit2.slope).abs() <= 1e-12 * fit.slope.abs());
        }
    }

    #[test]
    fn theory_and_special_exponents() {
        assert_relative_eq!(theory_exponent(3, 2.0).unwrap(), -2.0, max_relative = 1e-15);
        assert_relative_eq!(theory_exponent(2, 1.5).unwrap(), -1.5 / 4.25, max_relative = 1e-15);
        assert_relative_eq!(special_exponent(1.5).unwrap(), -1.0 / 3.0, max_relative = 1e-15);
        // The two-dimensional bound is the weaker one at p = 1.5.
        assert!(special_exponent(1.5).unwrap().abs() < theory_exponent(2, 1.5).unwrap().abs());
        assert!(theory_exponent(3, 1.0 + 2f64.sqrt()).is_err());
        assert!(ensure_subcritical(3, 1.0 + 2f64.sqrt()).is_err());
        assert!(ensure_subcritical(3, 2.0).is_ok());
    }

    #[test]
    fn exact_power_law_fit() {
        let eps = geometric_grid(1.0, 2.0, 6);
        let recs = synthetic(&eps, |e| 3.0 * e.powi(-2));
        let fit = fit_records(&recs, 3, 2.0, DataShape::Both).unwrap();
        assert_relative_eq!(fit.slope, -2.0, max_relative = 1e-12);
        assert_relative_eq!(fit.ratio, 1.0, max_relative = 1e-12);
        assert!(fit.monotone && fit.curvature_ok);
        assert!(fit.special.is_none());
    }

    #[test]
    fn fit_preconditions() {
        let recs = synthetic(&geometric_grid(1.0, 10.0, 4), |e| 1.0 / e);
        assert!(matches!(fit_records(&recs, 3, 2.0, DataShape::Both), Err(Error::InsufficientData(_))));
        let narrow = synthetic(&geometric_grid(1.0, 1.5, 6), |e| 1.0 / e);
        assert!(matches!(fit_records(&narrow, 3, 2.0, DataShape::Both), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn zero_amplitude_never_blows_up() {
        let rec = detect_blowup(&flat_config(3, 2.0, DataShape::Both, 0.1, 50.0), 0.0).unwrap();
        assert!(!rec.blew_up());
        assert_eq!(rec.outcome, RunOutcome::BudgetExhausted);
    }

    #[test]
    fn budget_exhaustion_is_a_record() {
        let rec = detect_blowup(&flat_config(3, 2.0, DataShape::U1, 0.1, 20.0), 0.1).unwrap();
        assert!(!rec.blew_up());
        assert!(rec.steps > 0);
    }

    #[test]
    fn blowup_time_converges_under_refinement() {
        let cfg = LifespanConfig {
            refine: true,
            ..flat_config(3, 2.0, DataShape::U1, 0.05, 400.0)
        };
        let rec = detect_blowup(&cfg, 4.0).unwrap();
        let change = rec.refinement_change.unwrap();
        assert!(change < 0.02, "T = {:?} vs {:?}", rec.t_detected, rec.t_refined);
    }

    #[test]
    fn lifespan_decreases_with_amplitude() {
        let cfg = flat_config(2, 1.5, DataShape::U1, 0.1, 500.0);
        let recs = sweep(&cfg, &geometric_grid(1.0, 10.0, 4)).unwrap();
        let ts: Vec<f64> = recs.iter().map(|r| r.t_detected.unwrap()).collect();
        assert!(ts.windows(2).all(|w| w[1] >= w[0]), "{ts:?}");
    }
}
