//! Second-order ODE studies: generic trajectories, the comparison solutions
//! `y″ = λ²m̃²y` run forward from `0` and backward from `T`, and blow-up
//! times for the Kato inequality `F″ = k(t+1)^{−α}F^β`.

use rayon::prelude::*;
use serde::Serialize;

use crate::damping::DampingProfile;
use crate::error::{Error, Result};
use crate::ode::{DenseStep, Dopri5, OdeOptions};
use crate::stats::{linear_fit, LinearFit};

/// Dense solution of `y″ = f(t, y, y′)`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    steps: Vec<DenseStep<2>>,
    pub t0: f64,
    pub t1: f64,
    pub y0: [f64; 2],
}

impl Trajectory {
    /// `(y, y′)` at any `t` between `t0` and `t1`.
    pub fn eval(&self, t: f64) -> Result<[f64; 2]> {
        let (lo, hi) = (self.t0.min(self.t1), self.t0.max(self.t1));
        if !(t >= lo && t <= hi) {
            return Err(Error::domain("t", t, "outside the integrated span"));
        }
        if t == self.t0 {
            return Ok(self.y0);
        }
        let dir = if self.t1 >= self.t0 { 1.0 } else { -1.0 };
        let idx = self
            .steps
            .partition_point(|s| (s.t1() - t) * dir < 0.0)
            .min(self.steps.len() - 1);
        Ok(self.steps[idx].eval(t))
    }

    pub fn steps(&self) -> usize {
        self.steps.len()
    }
}

/// Adaptive solution of `y″ = f(t, y, y′)` from `(t0, y, y′)` to `t1` (either direction).
pub fn integrate_2nd_order<F>(f: F, t0: f64, y0: [f64; 2], t1: f64, tol: f64) -> Result<Trajectory>
where
    F: Fn(f64, f64, f64) -> f64,
{
    let rhs = |t: f64, s: &[f64; 2]| [s[1], f(t, s[0], s[1])];
    let mut stepper = Dopri5::new(rhs, t0, y0, t1, OdeOptions::with_tol(tol, tol * 1e-2))?;
    let mut steps = Vec::new();
    while !stepper.finished() {
        stepper.step()?;
        steps.push(*stepper.last_step().expect("step taken"));
    }
    Ok(Trajectory { steps, t0, t1, y0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// `y(0) = 0`, `y′(0) = 1`.
    Forward,
    /// `y(T) = 0`, `y′(T) = −1`.
    Backward,
}

/// Samples of a comparison solution with the time change `η` alongside.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonSolution {
    pub lambda: f64,
    pub direction: Direction,
    pub horizon: f64,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub dy: Vec<f64>,
    pub eta: Vec<f64>,
    /// `inf` over samples of `min(λy/sinh(λD), |y′|/cosh(λD))`, where `D` is
    /// `η(t)` forward and `η(T) − η(t)` backward.
    pub c3: f64,
    /// Forward only: `sinh(λδ₁t)/(λδ₁) ≤ y ≤ (δ₁/λ)sinh(λt/δ₁)` at every sample.
    pub sandwich_ok: bool,
    pub positive: bool,
}

const COMPARISON_RTOL: f64 = 1e-12;

// State [y, y′, η] in the transformed time with η′ = m̃ = exp(∫₀^η b).
fn comparison_rhs(damping: &DampingProfile, lambda: f64) -> impl Fn(f64, &[f64; 3]) -> [f64; 3] + '_ {
    let l2 = lambda * lambda;
    move |_s, st: &[f64; 3]| {
        let m = if damping.is_zero() {
            1.0
        } else {
            damping.b_integral(st[2].max(0.0)).unwrap_or(f64::NAN).exp()
        };
        [st[1], l2 * m * m * st[0], m]
    }
}

fn sample_times(t_end: f64, samples: usize) -> Vec<f64> {
    (0..=samples).map(|i| t_end * i as f64 / samples as f64).collect()
}

fn run_sampled(
    damping: &DampingProfile,
    lambda: f64,
    start: f64,
    state: [f64; 3],
    times: &[f64],
) -> Result<Vec<[f64; 3]>> {
    crate::ode::solve_at(
        comparison_rhs(damping, lambda),
        start,
        state,
        times,
        OdeOptions::with_tol(COMPARISON_RTOL, 1e-14),
    )
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::OutOfRange(format!("lambda = {lambda} must be positive")));
    }
    Ok(())
}

/// `y″ = λ²m̃²(t)y`, `y(0) = 0`, `y′(0) = 1`, sampled at `samples + 1` points of `[0, T]`.
pub fn forward_comparison(
    damping: &DampingProfile,
    lambda: f64,
    t_max: f64,
    samples: usize,
) -> Result<ComparisonSolution> {
    check_lambda(lambda)?;
    let times = sample_times(t_max, samples);
    let states = run_sampled(damping, lambda, 0.0, [0.0, 1.0, 0.0], &times)?;
    let d1 = damping.delta1;
    let mut c3 = f64::INFINITY;
    let mut sandwich_ok = true;
    let mut positive = true;
    for (&t, s) in times.iter().zip(&states).skip(1) {
        let (y, dy, eta) = (s[0], s[1], s[2]);
        positive &= y > 0.0 && dy > 0.0;
        let x = lambda * eta;
        c3 = c3.min((lambda * y / x.sinh()).min(dy / x.cosh()));
        let lower = (lambda * d1 * t).sinh() / (lambda * d1);
        let upper = d1 / lambda * (lambda * t / d1).sinh();
        let slack = 1e-10 * y.abs();
        sandwich_ok &= y >= lower - slack && y <= upper + slack;
    }
    Ok(ComparisonSolution {
        lambda,
        direction: Direction::Forward,
        horizon: t_max,
        y: states.iter().map(|s| s[0]).collect(),
        dy: states.iter().map(|s| s[1]).collect(),
        eta: states.iter().map(|s| s[2]).collect(),
        t: times,
        c3,
        sandwich_ok,
        positive,
    })
}

/// `y″ = λ²m̃²(t)y`, `y(T) = 0`, `y′(T) = −1`, integrated backward to `0`.
pub fn backward_comparison(
    damping: &DampingProfile,
    lambda: f64,
    t_end: f64,
    samples: usize,
) -> Result<ComparisonSolution> {
    check_lambda(lambda)?;
    if !(t_end > 0.0) {
        return Err(Error::domain("T", t_end, "terminal time must be positive"));
    }
    let eta_end = damping.eta_of_s(t_end)?;
    let mut times = sample_times(t_end, samples);
    times.reverse();
    let mut states = run_sampled(damping, lambda, t_end, [0.0, -1.0, eta_end], &times)?;
    times.reverse();
    states.reverse();
    let mut c3 = f64::INFINITY;
    let mut positive = true;
    for s in states.iter().take(states.len() - 1) {
        let (y, dy, eta) = (s[0], s[1], s[2]);
        positive &= y > 0.0 && dy < 0.0;
        let x = lambda * (eta_end - eta);
        c3 = c3.min((lambda * y / x.sinh()).min(-dy / x.cosh()));
    }
    Ok(ComparisonSolution {
        lambda,
        direction: Direction::Backward,
        horizon: t_end,
        y: states.iter().map(|s| s[0]).collect(),
        dy: states.iter().map(|s| s[1]).collect(),
        eta: states.iter().map(|s| s[2]).collect(),
        t: times,
        c3,
        sandwich_ok: true,
        positive,
    })
}

/// Largest relative gap between the backward solution and `z(T − t)`, where
/// `z″ = λ²m̃²(T − σ)z`, `z(0) = 0`, `z′(0) = 1` is solved forward in `σ`.
pub fn reversal_discrepancy(
    damping: &DampingProfile,
    lambda: f64,
    t_end: f64,
    samples: usize,
) -> Result<f64> {
    let back = backward_comparison(damping, lambda, t_end, samples)?;
    let l2 = lambda * lambda;
    let rhs = |sigma: f64, z: &[f64; 2]| {
        let m = damping.m_tilde((t_end - sigma).max(0.0)).unwrap_or(f64::NAN);
        [z[1], l2 * m * m * z[0]]
    };
    let sigmas: Vec<f64> = back.t.iter().rev().map(|t| t_end - t).collect();
    let z = crate::ode::solve_at(rhs, 0.0, [0.0, 1.0], &sigmas, OdeOptions::with_tol(1e-12, 1e-14))?;
    let mut worst: f64 = 0.0;
    for (k, zk) in z.iter().enumerate() {
        let i = back.t.len() - 1 - k;
        let scale = back.y[i].abs().max(1e-300);
        if back.y[i] != 0.0 {
            worst = worst.max((zk[0] - back.y[i]).abs() / scale);
        }
    }
    Ok(worst)
}

/// `F″ = k(t+1)^{−α}F^β` with `F(0) = δ`, `F′(0) = F0′`, and the growth exponent `a`
/// of the lower bound `F ≥ δ(t+1)^a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KatoProblem {
    pub a: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub k: f64,
    pub dfdt0: f64,
}

impl KatoProblem {
    pub fn new(a: f64, alpha: f64, beta: f64, delta: f64, k: f64, dfdt0: f64) -> Result<Self> {
        if !(a >= 1.0) {
            return Err(Error::OutOfRange(format!("a = {a} must be at least 1")));
        }
        if !(beta > 1.0) {
            return Err(Error::OutOfRange(format!("beta = {beta} must exceed 1")));
        }
        if !(delta > 0.0 && k > 0.0 && dfdt0 >= 0.0) {
            return Err(Error::OutOfRange(
                "delta and k must be positive and F'(0) nonnegative".into(),
            ));
        }
        if !((beta - 1.0) * a > alpha - 2.0) {
            return Err(Error::OutOfRange(format!(
                "(beta - 1) a = {} must exceed alpha - 2 = {}",
                (beta - 1.0) * a,
                alpha - 2.0
            )));
        }
        Ok(Self {
            a,
            alpha,
            beta,
            delta,
            k,
            dfdt0,
        })
    }

    /// Predicted exponent of `δ` in the blow-up time: `−(β−1)/((β−1)a − α + 2)`.
    pub fn predicted_exponent(&self) -> f64 {
        -(self.beta - 1.0) / ((self.beta - 1.0) * self.a - self.alpha + 2.0)
    }

    pub fn with_delta(&self, delta: f64, dfdt0: f64) -> Result<Self> {
        Self::new(self.a, self.alpha, self.beta, delta, self.k, dfdt0)
    }
}

pub const KATO_THRESHOLDS: [f64; 3] = [1e8, 1e10, 1e12];
pub const KATO_HORIZON: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KatoBlowup {
    pub delta: f64,
    /// Extrapolated blow-up time.
    pub t_blowup: f64,
    /// Times where `F` crosses each of [`KATO_THRESHOLDS`].
    pub crossings: [f64; 3],
    /// Ratio of successive crossing gaps; in `(0, 1)` for a vertical asymptote.
    pub gap_ratio: f64,
}

/// Blow-up time of the Kato ODE, extrapolated from three threshold crossings.
pub fn kato_blowup_time(problem: &KatoProblem, tol: f64) -> Result<KatoBlowup> {
    let p = *problem;
    let rhs = move |t: f64, s: &[f64; 2]| {
        [s[1], p.k * (t + 1.0).powf(-p.alpha) * s[0].max(0.0).powf(p.beta)]
    };
    let opts = OdeOptions {
        rtol: tol,
        atol: tol * p.delta.min(1.0) * 1e-3,
        max_steps: 50_000_000,
        ..OdeOptions::default()
    };
    let mut stepper = Dopri5::new(rhs, 0.0, [p.delta, p.dfdt0], KATO_HORIZON, opts)?;
    let mut crossings = [f64::NAN; 3];
    let mut next = 0;
    while next < 3 {
        if stepper.finished() {
            return Err(Error::NoBlowup(KATO_HORIZON));
        }
        let before = stepper.y()[0];
        match stepper.step() {
            Ok(_) => {}
            Err(Error::StepUnderflow { .. }) if next > 0 => break,
            Err(e) => return Err(e),
        }
        let seg = *stepper.last_step().expect("step taken");
        let after = stepper.y()[0];
        while next < 3 && after >= KATO_THRESHOLDS[next] {
            crossings[next] = crossing_time(&seg, before, KATO_THRESHOLDS[next]);
            next += 1;
        }
    }
    if next < 3 {
        return Err(Error::Integration(format!(
            "step size collapsed before F reached {}",
            KATO_THRESHOLDS[next]
        )));
    }
    let d1 = crossings[1] - crossings[0];
    let d2 = crossings[2] - crossings[1];
    let gap_ratio = d2 / d1;
    let t_blowup = if d1 > d2 && d2 > 0.0 {
        crossings[2] + d2 * d2 / (d1 - d2)
    } else {
        crossings[2]
    };
    Ok(KatoBlowup {
        delta: p.delta,
        t_blowup,
        crossings,
        gap_ratio,
    })
}

// Bisection for F = level inside one dense step, F increasing across it.
fn crossing_time(seg: &DenseStep<2>, f_before: f64, level: f64) -> f64 {
    let (mut lo, mut hi) = (seg.t0, seg.t1());
    if f_before >= level {
        return lo;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if seg.eval(mid)[0] >= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Serialize)]
pub struct KatoSweep {
    pub points: Vec<KatoBlowup>,
    pub fit: LinearFit,
    pub predicted: f64,
}

/// Blow-up times over `deltas` with `F′(0) = δ`, and the fitted log–log slope.
pub fn kato_sweep(template: &KatoProblem, deltas: &[f64], tol: f64) -> Result<KatoSweep> {
    let points: Vec<Result<KatoBlowup>> = deltas
        .par_iter()
        .map(|&d| kato_blowup_time(&template.with_delta(d, d)?, tol))
        .collect();
    let points: Vec<KatoBlowup> = points.into_iter().collect::<Result<_>>()?;
    let x: Vec<f64> = points.iter().map(|p| p.delta.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.t_blowup.ln()).collect();
    Ok(KatoSweep {
        fit: linear_fit(&x, &y)?,
        predicted: template.predicted_exponent(),
        points,
    })
}
