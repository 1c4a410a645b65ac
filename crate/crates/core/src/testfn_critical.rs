//! Test functions for the critical power: the `λ`-averaged weight `ξ_q`, its
//! two-sided bounds, the integral inequality it yields for
//! `F(T) = ∫u(T)ξ_q(·,T,T)dv_g`, and the iteration that turns two lower bounds
//! for `F` into a lifespan bound.
//!
//! `T` and `t` run on the transformed clock `s`; `η` maps them to physical time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::damping::DampingProfile;
use crate::entire_solutions::{log_spaced, EigenFamily, EigenOptions, EigenSolver, RadialGrid};
use crate::error::{Error, Result};
use crate::lifespan::critical_exponent;
use crate::metric::MetricProfile;
use crate::quadrature::{pairwise_sum, trapezoid};
use crate::wave_solver::{RadialWaveState, StepStatus, WaveSolver};

/// Left end of the window on which the iteration's lower bounds hold.
pub const SLICING_START: f64 = 1.5;

/// `q = (n−1)/2 − 1/p`. Fails unless `p` is critical, i.e. unless
/// `(n−1)(1−p/2) − q = −1`.
pub fn critical_q(n: usize, p: f64) -> Result<f64> {
    critical_exponent(n)?;
    let a = n as f64 - 1.0;
    let q = a / 2.0 - 1.0 / p;
    let identity = a * (1.0 - p / 2.0) - q;
    if !((identity + 1.0).abs() <= 1e-12) {
        return Err(Error::domain("p", p, "q is defined only at the critical power"));
    }
    Ok(q)
}

fn bracket(x: f64) -> f64 {
    x.hypot(1.0)
}

/// Log-spaced `λ` nodes on `[λ₀·10^{−decades}, λ₀]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaGrid {
    pub per_decade: usize,
    pub decades: f64,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            per_decade: 24,
            decades: 5.0,
        }
    }
}

impl LambdaGrid {
    /// Twice as many nodes over the same range.
    pub fn refined(self) -> Self {
        Self {
            per_decade: 2 * self.per_decade,
            ..self
        }
    }

    fn nodes(&self, lambda0: f64) -> Result<Vec<f64>> {
        if self.per_decade == 0 || !(self.decades > 0.0 && self.decades.is_finite()) {
            return Err(Error::Configuration(format!(
                "lambda grid needs per_decade > 0 and decades > 0, got {} and {}",
                self.per_decade, self.decades
            )));
        }
        // Simpson's rule needs an even number of intervals.
        let mut intervals = ((self.per_decade as f64 * self.decades).round() as usize).max(2);
        intervals += intervals % 2;
        Ok(log_spaced(lambda0 * 10f64.powf(-self.decades), lambda0, intervals + 1))
    }
}

/// `ξ_q(r, T, t)` from a family of eigenfunctions and the damping clock.
#[derive(Debug, Clone)]
pub struct XiEvaluator {
    eigen: EigenSolver,
    family: EigenFamily,
    damping: DampingProfile,
    lambda_grid: LambdaGrid,
    // Quadrature weight times λ^q at each node, with the exact ∫₀^{λ_min} λ^q folded into the first.
    weights: Vec<f64>,
    pub q: f64,
    pub lambda0: f64,
    pub r1: f64,
    pub n: usize,
}

impl XiEvaluator {
    pub fn new(
        profile: &MetricProfile,
        damping: &DampingProfile,
        q: f64,
        r1: f64,
        grid: RadialGrid,
        lambdas: LambdaGrid,
    ) -> Result<Self> {
        if !(q > -1.0 && q.is_finite()) {
            return Err(Error::domain("q", q, "lambda^q is integrable at 0 only for q > -1"));
        }
        if !(r1 >= 0.0 && r1.is_finite()) {
            return Err(Error::domain("R1", r1, "data radius must be nonnegative"));
        }
        let eigen = EigenSolver::new(profile.clone(), EigenOptions::default())?;
        Self::build(eigen, damping.clone(), q, r1, grid, lambdas)
    }

    /// Evaluator on the solver's own radial grid, so that spatial sums reuse its nodes.
    pub fn for_solver(solver: &WaveSolver, q: f64, lambdas: LambdaGrid) -> Result<Self> {
        let grid = RadialGrid {
            dr: solver.dr,
            count: solver.count(),
        };
        Self::new(solver.profile(), solver.damping(), q, solver.r1, grid, lambdas)
    }

    /// The same evaluator with the `λ` spacing halved.
    pub fn refined(&self) -> Result<Self> {
        Self::build(
            self.eigen.clone(),
            self.damping.clone(),
            self.q,
            self.r1,
            self.family.grid,
            self.lambda_grid.refined(),
        )
    }

    fn build(
        eigen: EigenSolver,
        damping: DampingProfile,
        q: f64,
        r1: f64,
        grid: RadialGrid,
        lambda_grid: LambdaGrid,
    ) -> Result<Self> {
        let lambda0 = eigen.lambda0();
        let nodes = lambda_grid.nodes(lambda0)?;
        let family = eigen.build_family(&nodes, grid)?;
        let m = nodes.len() - 1;
        let h = (nodes[m] / nodes[0]).ln() / m as f64;
        // Simpson in u = ln λ, where dλ = λ du.
        let mut weights: Vec<f64> = nodes
            .iter()
            .enumerate()
            .map(|(j, &lam)| {
                let c = if j == 0 || j == m {
                    1.0
                } else if j % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * h / 3.0 * lam * lam.powf(q)
            })
            .collect();
        // Below λ_min the integrand is taken as its value there times (λ/λ_min)^q.
        weights[0] += nodes[0].powf(q + 1.0) / (q + 1.0);
        Ok(Self {
            n: eigen.profile().n,
            eigen,
            family,
            damping,
            lambda_grid,
            weights,
            q,
            lambda0,
            r1,
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.family.lambdas
    }

    pub fn lambda_grid(&self) -> LambdaGrid {
        self.lambda_grid
    }

    pub fn grid(&self) -> RadialGrid {
        self.family.grid
    }

    pub fn profile(&self) -> &MetricProfile {
        self.eigen.profile()
    }

    pub fn damping(&self) -> &DampingProfile {
        &self.damping
    }

    pub fn eta(&self, s: f64) -> Result<f64> {
        self.damping.eta_of_s(s)
    }

    // log of everything in the λ-integrand except φ_λ and the weight, for each node.
    fn log_kernel(&self, big_t: f64, t: f64) -> Result<Vec<f64>> {
        if !(t >= 0.0 && t <= big_t && big_t.is_finite()) {
            return Err(Error::domain("t", t, "need 0 <= t <= T"));
        }
        let eta_big = self.eta(big_t)?;
        if t == big_t {
            return Ok(self.lambdas().iter().map(|&lam| -lam * (eta_big + self.r1)).collect());
        }
        let eta_t = self.eta(t)?;
        let gap = eta_big - eta_t;
        // sinh(λ·gap)e^{−λ(η(T)+R₁)} = e^{−λ(η(t)+R₁)}(1 − e^{−2λ·gap})/2
        Ok(self
            .lambdas()
            .iter()
            .map(|&lam| {
                -lam * (eta_t + self.r1) + (-(-2.0 * lam * gap).exp_m1()).ln()
                    - (2.0 * lam * (big_t - t)).ln()
            })
            .collect())
    }

    /// `ξ_q(r, T, t)` for `0 ≤ t ≤ T`.
    pub fn xi(&self, r: f64, big_t: f64, t: f64) -> Result<f64> {
        let grid = self.grid();
        if !(r >= 0.0 && r <= grid.r_max()) {
            return Err(Error::domain("r", r, "radius lies beyond the eigenfunction grid"));
        }
        let kernel = self.log_kernel(big_t, t)?;
        let terms: Vec<f64> = kernel
            .iter()
            .zip(&self.weights)
            .enumerate()
            .map(|(j, (k, w))| w * (k + self.family.log_phi_at(j, r)).exp())
            .collect();
        Ok(pairwise_sum(&terms))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct XiSample {
    pub r: f64,
    pub big_t: f64,
    pub t: f64,
}

/// Samples `t = f·T` at radii where `∫₀ʳK = c·(η(T)+R₁)`, for every `T`, `f`, `c`.
pub fn xi_samples(
    ev: &XiEvaluator,
    big_ts: &[f64],
    t_fractions: &[f64],
    cone_fractions: &[f64],
) -> Result<Vec<XiSample>> {
    let mut out = Vec::with_capacity(big_ts.len() * t_fractions.len() * cone_fractions.len());
    for &big_t in big_ts {
        let reach = ev.eta(big_t)? + ev.r1;
        for &f in t_fractions {
            for &c in cone_fractions {
                out.push(XiSample {
                    r: ev.profile().k_integral_inverse(c * reach)?,
                    big_t,
                    t: f * big_t,
                });
            }
        }
    }
    Ok(out)
}

/// Measured constants of the two bounds on `ξ_q`:
/// `A₁ = inf ξ_q(r,T,t)⟨T⟩⟨t⟩^q` over `t < T`, and
/// `A₂ = sup ξ_q(r,T,T) / (⟨T⟩^{−(n−1)/2}⟨η(T) − ∫₀ʳK⟩^{(n−3)/2−q})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundMeasure {
    /// Present when `q > 0`.
    pub a1: Option<f64>,
    /// Present when `q > (n−3)/2`.
    pub a2: Option<f64>,
    pub used: usize,
    /// Samples outside `∫₀ʳK ≤ η(T)+R₁`.
    pub skipped: usize,
}

pub fn measure_xi_bounds(ev: &XiEvaluator, samples: &[XiSample]) -> Result<BoundMeasure> {
    let n = ev.n as f64;
    let lower_applies = ev.q > 0.0;
    let upper_applies = ev.q > (n - 3.0) / 2.0;
    if !lower_applies && !upper_applies {
        return Err(Error::domain("q", ev.q, "neither bound on xi applies"));
    }
    let rows: Vec<Result<Option<(Option<f64>, Option<f64>)>>> = samples
        .par_iter()
        .map(|s| {
            let eta_big = ev.eta(s.big_t)?;
            let k = ev.profile().k_integral(s.r)?;
            if k > (eta_big + ev.r1) * (1.0 + 1e-12) {
                return Ok(None);
            }
            let lower = if lower_applies && s.t < s.big_t {
                Some(ev.xi(s.r, s.big_t, s.t)? * bracket(s.big_t) * bracket(s.t).powf(ev.q))
            } else {
                None
            };
            let upper = if upper_applies {
                let envelope = bracket(s.big_t).powf(-(n - 1.0) / 2.0)
                    * bracket(eta_big - k).powf((n - 3.0) / 2.0 - ev.q);
                Some(ev.xi(s.r, s.big_t, s.big_t)? / envelope)
            } else {
                None
            };
            Ok(Some((lower, upper)))
        })
        .collect();
    let mut m = BoundMeasure {
        a1: None,
        a2: None,
        used: 0,
        skipped: 0,
    };
    for row in rows {
        match row? {
            None => m.skipped += 1,
            Some((lower, upper)) => {
                m.used += 1;
                if let Some(v) = lower {
                    m.a1 = Some(m.a1.map_or(v, |a| a.min(v)));
                }
                if let Some(v) = upper {
                    m.a2 = Some(m.a2.map_or(v, |a| a.max(v)));
                }
            }
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub base: BoundMeasure,
    pub lambda_refined: BoundMeasure,
    /// Same sample pattern with every `T` doubled.
    pub doubled_t: BoundMeasure,
    /// Largest ratio, either way round, between the base constant and a variant.
    pub a1_drift: Option<f64>,
    pub a2_drift: Option<f64>,
    /// `A₁ > 0`, `A₂ < ∞`, and both drifts below 2.
    pub stable: bool,
}

/// Measures `A₁` and `A₂` and their stability under halving the `λ` spacing
/// and doubling the range of `T`. The radial grid must reach the doubled cone.
pub fn xi_bounds_check(
    ev: &XiEvaluator,
    big_ts: &[f64],
    t_fractions: &[f64],
    cone_fractions: &[f64],
) -> Result<BoundReport> {
    let samples = xi_samples(ev, big_ts, t_fractions, cone_fractions)?;
    let doubled: Vec<f64> = big_ts.iter().map(|t| 2.0 * t).collect();
    let doubled_samples = xi_samples(ev, &doubled, t_fractions, cone_fractions)?;
    let base = measure_xi_bounds(ev, &samples)?;
    let lambda_refined = measure_xi_bounds(&ev.refined()?, &samples)?;
    let doubled_t = measure_xi_bounds(ev, &doubled_samples)?;
    let drift = |pick: fn(&BoundMeasure) -> Option<f64>| -> Option<f64> {
        let a = pick(&base)?;
        [pick(&lambda_refined)?, pick(&doubled_t)?]
            .iter()
            .map(|&b| (a / b).max(b / a))
            .reduce(f64::max)
    };
    let a1_drift = drift(|m| m.a1);
    let a2_drift = drift(|m| m.a2);
    let a1_ok = base.a1.is_none_or(|a| a > 0.0) && a1_drift.is_none_or(|d| d < 2.0);
    let a2_ok = base.a2.is_none_or(f64::is_finite) && a2_drift.is_none_or(|d| d < 2.0);
    Ok(BoundReport {
        base,
        lambda_refined,
        doubled_t,
        a1_drift,
        a2_drift,
        stable: a1_ok && a2_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalSample {
    pub s: f64,
    pub t: f64,
    /// `F(T) = ∫u(T)ξ_q(·,T,T)dv_g`.
    pub f: f64,
    /// `∫₀^T (T−t)∫|u(t)|^p ξ_q(·,T,t)dv_g dt`.
    pub rhs: f64,
    /// `F/rhs`, when `rhs > 0`.
    pub ratio: Option<f64>,
    /// `F(T)/(ε^p ln(2T/3))`, for `T > 3/2` and `ε > 0`.
    pub slicing_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalReport {
    pub p: f64,
    pub q: f64,
    pub eps: f64,
    pub samples: Vec<CriticalSample>,
    /// Clock interval over which the minima below are taken.
    pub window: (f64, f64),
    pub min_ratio: Option<f64>,
    pub min_slicing_ratio: Option<f64>,
}

/// Evolves `state` through the clock values `clock` and evaluates both sides
/// of the integral inequality for `F` at each of them.
///
/// The time integral on the right is the trapezoid rule over `clock`, so the
/// spacing sets its accuracy. The solver's support is checked at every sample.
pub fn critical_functionals(
    solver: &WaveSolver,
    state: &mut RadialWaveState,
    ev: &XiEvaluator,
    clock: &[f64],
    window: (f64, f64),
) -> Result<CriticalReport> {
    let grid = ev.grid();
    if grid.count != solver.count() || grid.dr != solver.dr {
        return Err(Error::InsufficientDomain(format!(
            "eigenfunction grid ({} nodes, dr {}) differs from the solver grid ({} nodes, dr {})",
            grid.count,
            grid.dr,
            solver.count(),
            solver.dr
        )));
    }
    if clock.is_empty() || clock[0] < state.s || clock.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Configuration(
            "clock values must increase and start no earlier than the state".into(),
        ));
    }
    let p = solver.cfg.p;
    let weights: Vec<f64> = solver.weights().iter().map(|w| w * solver.omega).collect();
    let lambdas = ev.lambdas().to_vec();
    let mut eta = Vec::with_capacity(clock.len());
    // Per sample and λ node: ∫uφ_λ and ∫|u|^pφ_λ, each times e^{−λ(η+R₁)}.
    let mut linear = Vec::with_capacity(clock.len());
    let mut source = Vec::with_capacity(clock.len());
    for &s in clock {
        let t = ev.eta(s)?;
        if solver.advance_to(state, t)? == StepStatus::NonFinite {
            return Err(Error::Integration(format!("solution became non-finite before s = {s}")));
        }
        solver.check_support(state)?;
        let active: Vec<usize> = (0..state.u.len()).filter(|&i| state.u[i] != 0.0).collect();
        let rows: Vec<(f64, f64)> = (0..lambdas.len())
            .into_par_iter()
            .map(|j| {
                let log_phi = ev.family.log_phi_row(j);
                let shift = lambdas[j] * (t + ev.r1);
                let (mut a, mut b) = (0.0, 0.0);
                for &i in &active {
                    let x = weights[i] * (log_phi[i] - shift).exp();
                    a += x * state.u[i];
                    b += x * state.u[i].abs().powf(p);
                }
                (a, b)
            })
            .collect();
        eta.push(t);
        linear.push(rows.iter().map(|r| r.0).collect::<Vec<f64>>());
        source.push(rows.iter().map(|r| r.1).collect::<Vec<f64>>());
    }
    let samples: Vec<CriticalSample> = (0..clock.len())
        .into_par_iter()
        .map(|k| {
            let f = pairwise_sum(&ev.weights.iter().zip(&linear[k]).map(|(w, a)| w * a).collect::<Vec<_>>());
            // Inner λ-integral at each earlier sample; the (T−t) factor cancels the one in ξ_q.
            let inner: Vec<f64> = (0..=k)
                .map(|l| {
                    let gap = eta[k] - eta[l];
                    let terms: Vec<f64> = lambdas
                        .iter()
                        .zip(&ev.weights)
                        .zip(&source[l])
                        .map(|((&lam, w), g)| w * g * (-(-2.0 * lam * gap).exp_m1()) / (2.0 * lam))
                        .collect();
                    pairwise_sum(&terms)
                })
                .collect();
            let rhs = trapezoid(&clock[..=k], &inner);
            let s = clock[k];
            let eps = solver.eps;
            CriticalSample {
                s,
                t: eta[k],
                f,
                rhs,
                ratio: (rhs > 0.0).then(|| f / rhs),
                slicing_ratio: (s > SLICING_START && eps > 0.0)
                    .then(|| f / (eps.powf(p) * (s / SLICING_START).ln())),
            }
        })
        .collect();
    let in_window = |s: &&CriticalSample| s.s >= window.0 && s.s <= window.1;
    let min_of = |pick: fn(&CriticalSample) -> Option<f64>| {
        samples.iter().filter(in_window).filter_map(pick).reduce(f64::min)
    };
    Ok(CriticalReport {
        p,
        q: ev.q,
        eps: solver.eps,
        window,
        min_ratio: min_of(|s| s.ratio),
        min_slicing_ratio: min_of(|s| s.slicing_ratio),
        samples,
    })
}

/// Constants of the two lower bounds the iteration starts from, valid for `T ≥ 3/2`:
/// `F(T) ≥ c₁ε^p ln(2T/3)` and
/// `F(T) ≥ c₂∫_{3/2}^T (1 − t/T) F(t)^p / (t (ln t)^{p−1}) dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicingConstants {
    pub p: f64,
    pub eps: f64,
    pub c1: f64,
    pub c2: f64,
}

/// The `j`-th lower bound `F(T) ≥ D_j (ln T)^{−b_j} (ln(T/ℓ_j))^{a_j}` for `T ≥ ℓ_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlicingIterate {
    pub j: usize,
    pub a: f64,
    pub b: f64,
    pub log_d: f64,
    pub ell: f64,
}

impl SlicingIterate {
    /// Logarithm of the bound; `−∞` at and below `ℓ_j`.
    pub fn log_bound(&self, big_t: f64) -> f64 {
        self.log_bound_at(big_t.ln())
    }

    /// Same bound taking `ln T`, for thresholds where `T` itself overflows.
    pub fn log_bound_at(&self, log_t: f64) -> f64 {
        let excess = log_t - self.ell.ln();
        if !(excess > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.log_d - self.b * log_t.ln() + self.a * excess.ln()
    }
}

fn check_constants(c: &SlicingConstants) -> Result<()> {
    if !(c.p > 1.0 && c.p.is_finite()) {
        return Err(Error::domain("p", c.p, "power must exceed 1"));
    }
    for (what, v) in [("eps", c.eps), ("c1", c.c1), ("c2", c.c2)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::domain(what, v, "must be nonnegative"));
        }
    }
    Ok(())
}

// log of c₂(1 − ℓ_j/ℓ_{j+1})/(p·a_j + 1), the factor gained at step j.
// 1 − ℓ_j/ℓ_{j+1} = x/(1+x) with x = 2^{−(j+1)}, kept exact for large j.
fn step_gain(c: &SlicingConstants, a: f64, j: usize) -> f64 {
    let x = 0.5f64.powi(j as i32 + 1);
    c.c2.ln() + x.ln() - x.ln_1p() - (c.p * a + 1.0).ln()
}

/// Iterates `j = 0..=count`. Inserting the `j`-th bound into the second
/// inequality and keeping `t ≤ Tℓ_j/ℓ_{j+1}` gives
/// `a_{j+1} = p·a_j + 1`, `b_{j+1} = p·b_j + p − 1`,
/// `D_{j+1} = c₂D_j^p(1 − ℓ_j/ℓ_{j+1})/(p·a_j + 1)`, with `ℓ_{j+1} = ℓ_j(1 + 2^{−(j+1)})`.
pub fn slicing_iterates(c: &SlicingConstants, count: usize) -> Result<Vec<SlicingIterate>> {
    check_constants(c)?;
    let mut it = SlicingIterate {
        j: 0,
        a: 1.0,
        b: 0.0,
        log_d: c.c1.ln() + c.p * c.eps.ln(),
        ell: SLICING_START,
    };
    let mut out = vec![it];
    for j in 0..count {
        let ell = it.ell * (1.0 + 0.5f64.powi(j as i32 + 1));
        it = SlicingIterate {
            j: j + 1,
            a: c.p * it.a + 1.0,
            b: c.p * it.b + c.p - 1.0,
            log_d: step_gain(c, it.a, j) + c.p * it.log_d,
            ell,
        };
        out.push(it);
    }
    Ok(out)
}

/// `ℓ_∞ = (3/2)∏_{k≥1}(1 + 2^{−k})`, the limit of the start points.
pub fn slicing_ell_limit() -> f64 {
    (1..64).fold(SLICING_START, |acc, k| acc * (1.0 + 0.5f64.powi(k)))
}

/// `B = c₁^{p−1}e^{−(p−1)E}2^{−p}` with `E = sup_j (ln D₀ − ln D_j/p^j)`.
///
/// For `T ≥ ℓ_∞²` every iterate then satisfies
/// `ln F(T) ≥ (p^j/(p−1))ln(Bε^{p(p−1)}ln T) + ((p−2)/(p−1))ln ln T + ln 2/(p−1)`.
pub fn slicing_b(c: &SlicingConstants) -> Result<f64> {
    check_constants(c)?;
    if c.c1 == 0.0 || c.c2 == 0.0 {
        return Ok(0.0);
    }
    let mut a = 1.0;
    let (mut partial, mut sup, mut scale) = (0.0f64, 0.0f64, 1.0 / c.p);
    for j in 0..4000 {
        let term = -scale * step_gain(c, a, j);
        partial += term;
        sup = sup.max(partial);
        if j > 8 && term.abs() <= 1e-17 * partial.abs().max(1.0) {
            break;
        }
        a = c.p * a + 1.0;
        scale /= c.p;
    }
    let pm1 = c.p - 1.0;
    Ok((pm1 * c.c1.ln() - pm1 * sup - c.p * 2f64.ln()).exp())
}

/// Right side of the closed-form bound in [`slicing_b`], as a logarithm.
pub fn closed_form_log_bound(c: &SlicingConstants, b: f64, j: usize, big_t: f64) -> f64 {
    let p = c.p;
    let lnln = big_t.ln().ln();
    p.powi(j as i32) / (p - 1.0) * (b * c.eps.powf(p * (p - 1.0)) * big_t.ln()).ln()
        + (p - 2.0) / (p - 1.0) * lnln
        + 2f64.ln() / (p - 1.0)
}

/// `ln T` at which `Bε^{p(p−1)} ln T = 2`; beyond it the bounds grow without
/// limit in `j`. Infinite when `B = 0`.
pub fn divergence_threshold(c: &SlicingConstants, b: f64) -> f64 {
    let x = b * c.eps.powf(c.p * (c.p - 1.0));
    if x > 0.0 {
        2.0 / x
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    pub constants: SlicingConstants,
    /// Largest `c₁` and `c₂` the samples support on their window.
    pub measured_c1: Option<f64>,
    pub measured_c2: Option<f64>,
    pub slicing1_holds: bool,
    pub slicing2_holds: bool,
    pub iterates: Vec<SlicingIterate>,
    /// Largest `j` such that iterates `0..=j` stay below every sample.
    pub max_valid_j: Option<usize>,
    pub b: f64,
    pub threshold_log_t: f64,
    /// `ln T_last` reaches the threshold, so the iteration leaves no finite `F`.
    pub diverges: bool,
    /// `ln` of the lifespan bound `max(exp(threshold), ℓ_∞²)`, when `B > 0`.
    pub log_lifespan_bound: Option<f64>,
}

/// Checks both starting inequalities on the samples `(T, F(T))`, runs the
/// iteration with the given constants and compares every iterate with the samples.
///
/// The integral in the second inequality starts at the first sample at or
/// beyond `3/2`, so for samples starting later it is checked on their window only.
pub fn slicing_iteration_check(
    times: &[f64],
    f: &[f64],
    c: &SlicingConstants,
    count: usize,
) -> Result<IterationReport> {
    check_constants(c)?;
    if times.len() != f.len() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Configuration("sample times must increase and match the values".into()));
    }
    if let Some(&v) = f.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::domain("F", v, "samples must be positive and finite"));
    }
    let first = times.partition_point(|&t| t < SLICING_START);
    let (ts, fs) = (&times[first..], &f[first..]);
    let p = c.p;
    let measured_c1 = ts
        .iter()
        .zip(fs)
        .filter(|(t, _)| **t > SLICING_START)
        .map(|(t, v)| v / (c.eps.powf(p) * (t / SLICING_START).ln()))
        .reduce(f64::min);
    let kernel: Vec<f64> = ts
        .iter()
        .zip(fs)
        .map(|(t, v)| v.powf(p) / (t * t.ln().powf(p - 1.0)))
        .collect();
    let measured_c2 = (1..ts.len())
        .map(|k| {
            let big_t = ts[k];
            let y: Vec<f64> = (0..=k).map(|l| (1.0 - ts[l] / big_t) * kernel[l]).collect();
            fs[k] / trapezoid(&ts[..=k], &y)
        })
        .reduce(f64::min);
    let holds = |given: f64, measured: Option<f64>| measured.is_some_and(|m| given <= m * (1.0 + 1e-12));
    let iterates = slicing_iterates(c, count)?;
    let mut max_valid_j = None;
    for it in &iterates {
        let valid = ts
            .iter()
            .zip(fs)
            .all(|(t, v)| it.log_bound(*t) <= v.ln() + 1e-9 * v.ln().abs().max(1.0));
        if !valid {
            break;
        }
        max_valid_j = Some(it.j);
    }
    let b = slicing_b(c)?;
    let threshold_log_t = divergence_threshold(c, b);
    let t_last = *times.last().ok_or_else(|| Error::InsufficientData("no samples".into()))?;
    let ell_inf = slicing_ell_limit();
    Ok(IterationReport {
        constants: *c,
        measured_c1,
        measured_c2,
        slicing1_holds: holds(c.c1, measured_c1),
        slicing2_holds: holds(c.c2, measured_c2),
        iterates,
        max_valid_j,
        b,
        threshold_log_t,
        diverges: t_last.ln() >= threshold_log_t,
        log_lifespan_bound: threshold_log_t
            .is_finite()
            .then(|| threshold_log_t.max(2.0 * ell_inf.ln())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{Dopri5, OdeOptions};
    use crate::quadrature::{integrate, QuadOptions};
    use crate::wave_solver::{DataProfile, DataShape, SolverConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn flat3_evaluator(q: f64, r_max: f64) -> XiEvaluator {
        let grid = RadialGrid::new(0.05, r_max).unwrap();
        XiEvaluator::new(&MetricProfile::flat(3).unwrap(), &DampingProfile::zero(), q, 1.0, grid, LambdaGrid::default())
            .unwrap()
    }

    fn shared_flat3() -> &'static XiEvaluator {
        static EV: OnceLock<XiEvaluator> = OnceLock::new();
        EV.get_or_init(|| flat3_evaluator(2.0 - 2f64.sqrt(), 60.0))
    }

    #[test]
    fn critical_q_values_and_identity() {
        let q3 = critical_q(3, 1.0 + 2f64.sqrt()).unwrap();
        assert_relative_eq!(q3, 2.0 - 2f64.sqrt(), max_relative = 1e-14);
        let p2 = (3.0 + 17f64.sqrt()) / 2.0;
        let q2 = critical_q(2, p2).unwrap();
        assert_relative_eq!(q2, 0.5 - 2.0 / (3.0 + 17f64.sqrt()), max_relative = 1e-14);
        assert!((q2 - 0.21922).abs() < 1e-5);
        for n in 2..=8 {
            let p = critical_exponent(n).unwrap();
            let q = critical_q(n, p).unwrap();
            assert!(((n as f64 - 1.0) * (1.0 - p / 2.0) - q + 1.0).abs() <= 1e-12);
            assert!(q > 0.0_f64.max((n as f64 - 3.0) / 2.0));
        }
        assert!(critical_q(3, 2.0).is_err());
    }

    #[test]
    fn rejects_bad_q_and_far_radius() {
        let grid = RadialGrid::new(0.1, 5.0).unwrap();
        let flat = MetricProfile::flat(3).unwrap();
        let zero = DampingProfile::zero();
        assert!(XiEvaluator::new(&flat, &zero, -1.0, 1.0, grid, LambdaGrid::default()).is_err());
        let ev = XiEvaluator::new(&flat, &zero, 0.5, 1.0, grid, LambdaGrid { per_decade: 8, decades: 3.0 }).unwrap();
        assert!(matches!(ev.xi(5.5, 2.0, 2.0), Err(Error::Domain { .. })));
        assert!(ev.xi(1.0, 2.0, 3.0).is_err());
    }

    #[test]
    fn xi_matches_closed_form_family() {
        // Flat n = 3: Φ_λ(r) = sinh(λr)/(λr sinh 1), λ₀ = 1.
        let ev = flat3_evaluator(0.0, 30.0);
        for &(r, big_t) in &[(0.0, 5.0), (3.0, 5.0), (5.9, 5.0), (10.0, 20.0), (20.0, 20.0)] {
            let oracle = integrate(
                |lam: f64| {
                    let phi = if lam * r == 0.0 { 1.0 } else { (lam * r).sinh() / (lam * r) };
                    (-lam * (big_t + 1.0)).exp() * phi / 1f64.sinh()
                },
                0.0,
                1.0,
                QuadOptions::default(),
            )
            .unwrap()
            .value;
            let got = ev.xi(r, big_t, big_t).unwrap();
            assert_relative_eq!(got, oracle, max_relative = 1e-6);
        }
    }

    #[test]
    fn xi_is_continuous_at_least_first_order() {
        let ev = shared_flat3();
        let (r, big_t) = (4.0, 10.0);
        let at = ev.xi(r, big_t, big_t).unwrap();
        let gaps: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|h| (ev.xi(r, big_t, big_t - h).unwrap() - at).abs())
            .collect();
        // Undamped, sinh(x)/x is even and the gap closes at second order.
        for w in gaps.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order > 0.9, "order {order}");
        }
    }

    #[test]
    fn damped_limit_carries_the_clock_rate() {
        // As t → T the t < T branch tends to η′(T)·ξ_q(r,T,T) = m̃(T)·ξ_q(r,T,T).
        let damping = DampingProfile::power(1.0, 2.0).unwrap();
        let grid = RadialGrid::new(0.05, 20.0).unwrap();
        let ev = XiEvaluator::new(&MetricProfile::flat(3).unwrap(), &damping, 0.5, 1.0, grid, LambdaGrid::default())
            .unwrap();
        let (r, big_t) = (2.0, 6.0);
        let limit = damping.m_tilde(big_t).unwrap() * ev.xi(r, big_t, big_t).unwrap();
        assert!((damping.m_tilde(big_t).unwrap() - 1.0).abs() > 0.1);
        let near = ev.xi(r, big_t, big_t - 1e-4).unwrap();
        assert_relative_eq!(near, limit, max_relative = 1e-3);
    }

    #[test]
    fn xi_decreases_in_big_t_at_equal_times() {
        let ev = shared_flat3();
        let values: Vec<f64> = [2.0, 4.0, 8.0, 16.0, 32.0].iter().map(|&t| ev.xi(1.5, t, t).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn xi_is_positive(big_t in 0.5f64..40.0, frac in 0.0f64..=1.0, cone in 0.0f64..=1.0) {
            let ev = shared_flat3();
            let r = cone * (big_t + ev.r1);
            prop_assert!(ev.xi(r, big_t, frac * big_t).unwrap() > 0.0);
        }

        #[test]
        fn recursion_has_closed_form(p in 1.1f64..4.0, c1 in 0.1f64..10.0, c2 in 0.1f64..10.0, eps in 0.05f64..1.0) {
            let c = SlicingConstants { p, eps, c1, c2 };
            let its = slicing_iterates(&c, 12).unwrap();
            // a_k = (p^{k+1}−1)/(p−1), b_k = p^k − 1, ℓ_k = (3/2)∏_{i≤k}(1+2^{−i}),
            // ln D_j = p^j(ln D₀ + Σ_{k<j} p^{−k−1} ln(c₂(1 − ℓ_k/ℓ_{k+1})/(p·a_k + 1))).
            let a = |k: i32| (p.powi(k + 1) - 1.0) / (p - 1.0);
            let ell = |k: i32| (1..=k).fold(1.5, |acc, i| acc * (1.0 + 0.5f64.powi(i)));
            for it in &its {
                let j = it.j as i32;
                prop_assert!((it.a - a(j)).abs() <= 1e-9 * it.a);
                prop_assert!((it.b - (p.powi(j) - 1.0)).abs() <= 1e-9 * it.b.max(1.0));
                prop_assert!((it.ell - ell(j)).abs() <= 1e-12 * it.ell);
                let sum: f64 = (0..j)
                    .map(|k| p.powi(-k - 1) * (c2 * (1.0 - ell(k) / ell(k + 1)) / (p * a(k) + 1.0)).ln())
                    .sum();
                let log_d = p.powi(j) * (c1.ln() + p * eps.ln() + sum);
                prop_assert!((it.log_d - log_d).abs() <= 1e-2 * log_d.abs().max(1.0));
            }
        }

        #[test]
        fn threshold_sets_the_log_argument_to_two(p in 1.1f64..4.0, c1 in 0.1f64..10.0, c2 in 0.1f64..10.0, eps in 0.05f64..1.0) {
            let c = SlicingConstants { p, eps, c1, c2 };
            let b = slicing_b(&c).unwrap();
            let lt = divergence_threshold(&c, b);
            prop_assert!((b * eps.powf(p * (p - 1.0)) * lt - 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn first_iterate_by_hand() {
        // a₁ = 3, b₁ = 1, ℓ₁ = 9/4, D₁ = c₂D₀²(1 − 2/3)/3 = 1/18 for c₁ = ε = 1, c₂ = 1/2.
        let c = SlicingConstants { p: 2.0, eps: 1.0, c1: 1.0, c2: 0.5 };
        let its = slicing_iterates(&c, 1).unwrap();
        assert_eq!((its[1].a, its[1].b, its[1].ell), (3.0, 1.0, 2.25));
        assert_relative_eq!(its[1].log_d, (1.0f64 / 18.0).ln(), max_relative = 1e-14);
        let big_t = 100.0f64;
        let by_hand = (1.0 / 18.0) * (big_t / 2.25).ln().powi(3) / big_t.ln();
        assert_relative_eq!(its[1].log_bound(big_t), by_hand.ln(), max_relative = 1e-13);
    }

    #[test]
    fn bound_in_log_time_matches_and_survives_overflow() {
        let c = SlicingConstants { p: 2.0, eps: 1.0, c1: 1.0, c2: 0.5 };
        let its = slicing_iterates(&c, 6).unwrap();
        for it in &its {
            assert_eq!(it.log_bound_at(100f64.ln()).is_finite(), it.log_bound(100.0).is_finite());
            if it.log_bound(100.0).is_finite() {
                assert_relative_eq!(it.log_bound_at(100f64.ln()), it.log_bound(100.0), max_relative = 1e-13);
            }
        }
        // ln T = 5000 overflows T itself.
        assert!(its[3].log_bound(5000f64.exp()).is_nan() || its[3].log_bound(5000f64.exp()).is_infinite());
        assert!(its[3].log_bound_at(5000.0).is_finite());
    }

    #[test]
    fn log_samples_escalate_past_threshold() {
        // F = ln T on [4, 10⁴] with constants chosen so the threshold lies inside the window.
        let times: Vec<f64> = log_spaced(4.0, 1e4, 200);
        let f: Vec<f64> = times.iter().map(|t| t.ln()).collect();
        let c = SlicingConstants { p: 2.0, eps: 1.0, c1: 10.0, c2: 100.0 };
        let rep = slicing_iteration_check(&times, &f, &c, 12).unwrap();
        assert!(rep.diverges);
        assert!(rep.threshold_log_t < 1e4f64.ln());
        // Hand-picked constants exceed what ln T supports, so the bounds overtake it.
        assert!(!rep.slicing2_holds);
        assert!(rep.max_valid_j.is_none_or(|j| j < 12));
        // Double-exponential escalation at the end of the window: successive logs grow by about p.
        let logs: Vec<f64> = rep.iterates.iter().map(|it| it.log_bound(1e4)).collect();
        let last = logs.len() - 1;
        assert_relative_eq!(logs[last] / logs[last - 1], 2.0, max_relative = 0.05);
    }

    #[test]
    fn zero_constants_conclude_nothing() {
        let times: Vec<f64> = log_spaced(2.0, 100.0, 50);
        let f: Vec<f64> = times.iter().map(|t| t.ln()).collect();
        let c = SlicingConstants { p: 1.0 + 2f64.sqrt(), eps: 0.5, c1: 0.0, c2: 0.0 };
        let rep = slicing_iteration_check(&times, &f, &c, 8).unwrap();
        assert_eq!(rep.b, 0.0);
        assert!(rep.threshold_log_t.is_infinite() && !rep.diverges);
        assert!(rep.log_lifespan_bound.is_none());
        assert!(rep.iterates.iter().all(|it| it.log_bound(50.0) == f64::NEG_INFINITY));
        assert_eq!(rep.max_valid_j, Some(8));
        assert!(slicing_iteration_check(&[2.0, 3.0], &[1.0, 0.0], &c, 2).is_err());
    }

    // Solution of F(T) = D ln(2T/3) + C∫_{3/2}^T(1 − t/T)F^p/(t(ln t)^{p−1})dt, which
    // satisfies both starting inequalities with equality in each term. In σ = ln T
    // it reads F″ + F′ = D + C F^p σ^{1−p}, F = 0 and F′ = D at σ = ln(3/2).
    fn synthetic_f(d: f64, c: f64, p: f64, sigma_end: f64) -> (Vec<f64>, Vec<f64>, Option<f64>) {
        let rhs = move |s: f64, y: &[f64; 2]| [y[1], d + c * y[0].max(0.0).powf(p) * s.powf(1.0 - p) - y[1]];
        let opts = OdeOptions { rtol: 1e-10, atol: 1e-14, ..OdeOptions::default() };
        let mut ode = Dopri5::new(rhs, SLICING_START.ln(), [0.0, d], sigma_end, opts).unwrap();
        let (mut ts, mut fs) = (Vec::new(), Vec::new());
        while !ode.finished() {
            match ode.step() {
                Ok(s) => {
                    if ode.y()[0] > 1e12 {
                        return (ts, fs, Some(s));
                    }
                    ts.push(s.exp());
                    fs.push(ode.y()[0]);
                }
                Err(_) => return (ts, fs, Some(ode.t())),
            }
        }
        (ts, fs, None)
    }

    #[test]
    fn iterates_bound_an_exact_solution_and_its_blowup() {
        let p = 2.0;
        let (c1, c2) = (1.0, 1.0);
        let mut scaled = Vec::new();
        for &eps in &[0.8, 0.6, 0.45] {
            let c = SlicingConstants { p, eps, c1, c2 };
            let d = c1 * eps.powf(p);
            let (ts, fs, blowup) = synthetic_f(d, c2, p, 1e4);
            let sigma_star = blowup.expect("synthetic F blows up");
            // Drop the first node, where F = 0 exactly.
            let keep = ts.iter().position(|&t| t > SLICING_START).unwrap();
            let rep = slicing_iteration_check(&ts[keep..], &fs[keep..], &c, 10).unwrap();
            assert_eq!(rep.max_valid_j, Some(10), "eps {eps}");
            let bound = rep.log_lifespan_bound.unwrap();
            assert!(sigma_star <= bound, "eps {eps}: ln T* = {sigma_star}, bound {bound}");
            scaled.push(sigma_star * eps.powf(p * (p - 1.0)));
        }
        // ln T* ∝ ε^{−p(p−1)}: the rescaled lifespans agree to within a factor 2.
        let (lo, hi) = scaled.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi / lo < 2.0, "{scaled:?}");
    }

    #[test]
    fn closed_form_is_a_lower_envelope_of_the_iterates() {
        let c = SlicingConstants { p: 1.0 + 2f64.sqrt(), eps: 0.7, c1: 2.0, c2: 3.0 };
        let b = slicing_b(&c).unwrap();
        let ell2 = slicing_ell_limit().powi(2);
        let its = slicing_iterates(&c, 14).unwrap();
        for &big_t in &[ell2, 50.0, 1e3, 1e6] {
            for it in &its {
                assert!(it.log_bound(big_t) >= closed_form_log_bound(&c, b, it.j, big_t) - 1e-9);
            }
        }
        // Past the threshold both grow by the factor p per iterate.
        let big_t = divergence_threshold(&c, b).exp() * 10.0;
        for w in its[10..].windows(2) {
            let exact = w[1].log_bound(big_t) / w[0].log_bound(big_t);
            let shape = closed_form_log_bound(&c, b, w[1].j, big_t) / closed_form_log_bound(&c, b, w[0].j, big_t);
            assert_relative_eq!(exact, c.p, max_relative = 1e-2);
            assert_relative_eq!(shape, c.p, max_relative = 1e-2);
        }
    }

    #[test]
    fn zero_solution_has_zero_functionals() {
        let flat = MetricProfile::flat(3).unwrap();
        let cfg = SolverConfig { dr: 0.1, t_max: 4.0, p: 1.0 + 2f64.sqrt(), ..SolverConfig::default() };
        let data = DataProfile::new(DataShape::Both, 1.0).unwrap();
        let (solver, mut state) = WaveSolver::init(&flat, &DampingProfile::zero(), data, 0.0, cfg).unwrap();
        let ev = XiEvaluator::for_solver(&solver, 2.0 - 2f64.sqrt(), LambdaGrid { per_decade: 8, decades: 3.0 }).unwrap();
        let clock: Vec<f64> = (0..=8).map(|k| 0.5 * k as f64).collect();
        let rep = critical_functionals(&solver, &mut state, &ev, &clock, (2.0, 4.0)).unwrap();
        assert!(rep.samples.iter().all(|s| s.f == 0.0 && s.rhs == 0.0 && s.ratio.is_none()));
        assert!(rep.min_ratio.is_none() && rep.min_slicing_ratio.is_none());
    }

    #[test]
    fn undamped_flat_inequality_is_an_identity_plus_data() {
        // With m̃ ≡ 1 the comparison function is sinh(λ(T−t))/λ exactly, so
        // F(T) − rhs(T) = ε∫λ^q e^{−λ(T+R₁)}[cosh(λT)∫u₀Φ_λ + sinh(λT)/λ ∫u₁Φ_λ]dλ.
        let flat = MetricProfile::flat(3).unwrap();
        let p = 1.0 + 2f64.sqrt();
        let q = 2.0 - 2f64.sqrt();
        let (eps, t_end) = (0.5, 6.0);
        let cfg = SolverConfig { dr: 0.025, t_max: t_end, p, ..SolverConfig::default() };
        let data = DataProfile::new(DataShape::Both, 1.0).unwrap();
        let (solver, mut state) = WaveSolver::init(&flat, &DampingProfile::zero(), data, eps, cfg).unwrap();
        let ev = XiEvaluator::for_solver(&solver, q, LambdaGrid::default()).unwrap();
        let clock: Vec<f64> = (0..=240).map(|k| 0.025 * k as f64).collect();
        let rep = critical_functionals(&solver, &mut state, &ev, &clock, (2.0, t_end)).unwrap();
        let opts = QuadOptions { abs_tol: 1e-13, rel_tol: 1e-10, max_intervals: 2000 };
        let phi = |lam: f64, r: f64| if r == 0.0 { 1.0 / 1f64.sinh() } else { (lam * r).sinh() / (lam * r * 1f64.sinh()) };
        let moment = |lam: f64, g: &dyn Fn(f64) -> f64| {
            4.0 * std::f64::consts::PI
                * integrate(|r| g(r) * phi(lam, r) * r * r, 0.0, 1.0, opts).unwrap().value
        };
        for s in rep.samples.iter().filter(|s| [2.0, 4.0, 6.0].iter().any(|t| (s.s - t).abs() < 1e-9)) {
            let big_t = s.s;
            let data_term = integrate(
                |lam: f64| {
                    let a = moment(lam, &|r| data.u0(r));
                    let b = moment(lam, &|r| data.u1(r));
                    eps * lam.powf(q)
                        * (0.5 * (1.0 + (-2.0 * lam * big_t).exp()) * a
                            + 0.5 * (-(-2.0 * lam * big_t).exp_m1()) / lam * b)
                        * (-lam).exp()
                },
                0.0,
                1.0,
                opts,
            )
            .unwrap()
            .value;
            let defect = s.f - s.rhs - data_term;
            assert!(defect.abs() <= 2e-3 * s.f, "T {big_t}: F {} rhs {} data {data_term}", s.f, s.rhs);
        }
    }
}
