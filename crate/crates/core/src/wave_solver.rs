//! Radial semilinear wave equation on `(t, r)`.
//!
//! Two formulations share one spatial operator. The direct one evolves
//! `∂²ₜu − Δ_g u + b(t)∂ₜu = |u|^p` in physical time. The transformed one
//! evolves `∂²ₛu = m̃²(s)(Δ_g u + |u|^p)` in the clock `s = h(t)`, where the
//! damping has been absorbed.
//!
//! Space is a cell-centred finite-volume discretization of
//! `K⁻¹r^{1−n}∂ᵣ(K⁻¹r^{n−1}∂ᵣu)`. Node `i` owns the shell
//! `[r_{i−1/2}, r_{i+1/2}]` with weight `wᵢ = K(rᵢ)(r_{i+1/2}ⁿ − r_{i−1/2}ⁿ)/n`.
//! Fluxes live on half-nodes and vanish at the origin, so `Σ wᵢ (Δ_g u)ᵢ`
//! telescopes to the boundary flux. That is zero whenever the support stays
//! inside the grid, which makes `F″ = m̃²∫|u|^p` an exact identity of the
//! semi-discrete system.
//!
//! Time stepping is kick–drift–kick leapfrog. In the direct formulation the
//! first half-kick treats the damping implicitly and the second explicitly.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::damping::DampingProfile;
use crate::entire_solutions::{EigenOptions, EigenSolver, RadialGrid};
use crate::error::{Error, Result};
use crate::metric::MetricProfile;

/// Relative level below which `|u|` counts as numerically zero.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

/// Multiples of `ε` whose crossings by `sup|u|` locate blow-up.
pub const BLOWUP_LEVELS: [f64; 3] = [1e6, 1e8, 1e10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataShape {
    /// `u(0) = εw`, `∂ₜu(0) = 0`.
    U0,
    /// `u(0) = 0`, `∂ₜu(0) = εw`.
    U1,
    /// Both equal to `εw`.
    Both,
}

/// Initial data built from the bump `w(r) = (1 − (r/R₀)²)⁴` on `r < R₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataProfile {
    pub shape: DataShape,
    pub r0: f64,
}

impl DataProfile {
    pub fn new(shape: DataShape, r0: f64) -> Result<Self> {
        if !(r0 > 0.0 && r0.is_finite()) {
            return Err(Error::OutOfRange(format!("support radius R0 = {r0} must be positive")));
        }
        Ok(Self { shape, r0 })
    }

    pub fn bump(&self, r: f64) -> f64 {
        let x = r / self.r0;
        if x >= 1.0 {
            0.0
        } else {
            (1.0 - x * x).powi(4)
        }
    }

    pub fn u0(&self, r: f64) -> f64 {
        match self.shape {
            DataShape::U0 | DataShape::Both => self.bump(r),
            DataShape::U1 => 0.0,
        }
    }

    pub fn u1(&self, r: f64) -> f64 {
        match self.shape {
            DataShape::U1 | DataShape::Both => self.bump(r),
            DataShape::U0 => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// Damping absorbed by the change of clock `s = h(t)`.
    Transformed,
    /// Damping term kept, evolved in physical time.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub dr: f64,
    /// Courant number `ν` in `Δt = ν·Δr·δ₀·δ₁`.
    pub cfl: f64,
    /// Physical-time budget.
    pub t_max: f64,
    /// Outer radius; sized from the budget when absent.
    pub r_max: Option<f64>,
    pub p: f64,
    pub nonlinear: bool,
    /// Confine the solution to the light cone widened by one cell, with a
    /// reflecting wall that moves outward with it.
    pub light_cone_mask: bool,
    /// Fraction of the nonlinear time scale `(m̃²p·sup|u|^{p−1})^{−1/2}` allowed per step.
    pub kappa: f64,
    pub formulation: Formulation,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dr: 0.05,
            cfl: 0.5,
            t_max: 10.0,
            r_max: None,
            p: 2.0,
            nonlinear: true,
            light_cone_mask: true,
            kappa: 0.05,
            formulation: Formulation::Transformed,
        }
    }
}

impl SolverConfig {
    /// Largest admissible Courant number in dimension `n`.
    pub fn max_cfl(n: usize) -> f64 {
        // The origin cell of the radial operator has spectral radius up to 4n/(KΔr)²;
        // leapfrog needs Δt ≤ KΔr/√n there.
        0.5f64.min(1.0 / (n as f64).sqrt())
    }
}

/// Solution at one instant. `t` is physical time; `s` is the evolution clock,
/// equal to `t` in the direct formulation. `v` is `∂u` with respect to that clock.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialWaveState {
    pub t: f64,
    pub s: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: usize,
    acc: Vec<f64>,
    // Nodes above `hi` are zero and stay zero during the next step's kicks.
    hi: usize,
    // sup|u| as of the last step.
    sup: f64,
}

impl RadialWaveState {
    pub fn sup_abs(&self) -> f64 {
        self.u[..=self.hi].iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Power {
    Square,
    Cube,
    ThreeHalves,
    General(f64),
}

impl Power {
    fn new(p: f64) -> Self {
        if p == 2.0 {
            Power::Square
        } else if p == 3.0 {
            Power::Cube
        } else if p == 1.5 {
            Power::ThreeHalves
        } else {
            Power::General(p)
        }
    }

    #[inline]
    fn eval(self, u: f64) -> f64 {
        let a = u.abs();
        match self {
            Power::Square => a * a,
            Power::Cube => a * a * a,
            Power::ThreeHalves => a * a.sqrt(),
            Power::General(p) => a.powf(p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Finite,
    /// A non-finite value appeared; the state is no longer meaningful.
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportReport {
    pub t: f64,
    /// First node past which `u` and `v` are numerically zero.
    pub edge: f64,
    /// `η(t) + R₁ − ∫₀^{edge} K`.
    pub slack: f64,
    pub tolerance: f64,
}

/// `φ_λ` sampled on the solver nodes, kept as `log φ` to survive large `λr`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub lambda: f64,
    log_phi: Vec<f64>,
}

impl TestFunction {
    pub fn new(solver: &WaveSolver, lambda: f64) -> Result<Self> {
        let eig = EigenSolver::new(solver.profile.clone(), EigenOptions::default())?;
        let r_max = solver.r_max().max(10.0 / lambda);
        let grid = RadialGrid::new(solver.dr, r_max)?;
        let sol = eig.build(lambda, grid)?;
        Self::from_log_values(solver, lambda, sol.log_phi)
    }

    /// Wrap precomputed `log φ` node values; they must cover every solver node.
    pub fn from_log_values(solver: &WaveSolver, lambda: f64, mut log_phi: Vec<f64>) -> Result<Self> {
        if log_phi.len() < solver.count {
            return Err(Error::InsufficientDomain(format!(
                "test function covers {} nodes, solver grid has {}",
                log_phi.len(),
                solver.count
            )));
        }
        log_phi.truncate(solver.count);
        Ok(Self { lambda, log_phi })
    }
}

#[derive(Debug, Clone)]
pub struct WaveSolver {
    profile: MetricProfile,
    damping: DampingProfile,
    pub data: DataProfile,
    pub eps: f64,
    pub cfg: SolverConfig,
    pub dr: f64,
    count: usize,
    power: Power,
    // flux[i] = r_{i+1/2}^{n−1} / (K(r_{i+1/2}) Δr)
    flux: Vec<f64>,
    weight: Vec<f64>,
    inv_weight: Vec<f64>,
    k_int: Vec<f64>,
    /// `∫₀^{R₀} K`.
    pub r1: f64,
    /// Area of the unit sphere `S^{n−1}`.
    pub omega: f64,
    dt_cfl: f64,
}

impl WaveSolver {
    /// Solver and the initial state `u = εu₀`, `v = εu₁`.
    pub fn init(
        profile: &MetricProfile,
        damping: &DampingProfile,
        data: DataProfile,
        eps: f64,
        cfg: SolverConfig,
    ) -> Result<(Self, RadialWaveState)> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::OutOfRange(format!("amplitude eps = {eps} must be nonnegative")));
        }
        if !(cfg.dr > 0.0 && cfg.dr.is_finite()) {
            return Err(Error::Configuration(format!("dr = {} must be positive", cfg.dr)));
        }
        if !(cfg.t_max > 0.0 && cfg.t_max.is_finite()) {
            return Err(Error::Configuration(format!("t_max = {} must be positive", cfg.t_max)));
        }
        if !(cfg.p > 1.0 && cfg.p.is_finite()) {
            return Err(Error::Configuration(format!("p = {} must exceed 1", cfg.p)));
        }
        if !(cfg.kappa > 0.0 && cfg.kappa <= 1.0) {
            return Err(Error::Configuration(format!("kappa = {} must lie in (0, 1]", cfg.kappa)));
        }
        let n = profile.n;
        let max_cfl = SolverConfig::max_cfl(n);
        if !(cfg.cfl > 0.0 && cfg.cfl <= max_cfl) {
            return Err(Error::Configuration(format!(
                "Courant number {} must lie in (0, {max_cfl}] for n = {n}",
                cfg.cfl
            )));
        }
        let dr = cfg.dr;
        let delta0 = profile.delta0;
        let r1 = profile.k_integral(data.r0)?;
        let needed = (cfg.t_max + r1) / delta0 + 4.0 * dr / delta0;
        let r_max = match cfg.r_max {
            Some(r) if r < needed => {
                return Err(Error::Configuration(format!(
                    "r_max = {r} cannot contain the light cone up to t = {}; need at least {needed}",
                    cfg.t_max
                )))
            }
            Some(r) => r,
            None => needed,
        };
        let count = (r_max / dr).ceil() as usize + 1;
        let nf = n as f64;
        let half = |i: usize| (i as f64 + 0.5) * dr;
        let mut flux = Vec::with_capacity(count);
        let mut weight = Vec::with_capacity(count);
        for i in 0..count {
            let r_out = half(i);
            flux.push(r_out.powi(n as i32 - 1) / (profile.k(r_out) * dr));
            let r_in = if i == 0 { 0.0 } else { half(i - 1) };
            let r = i as f64 * dr;
            weight.push(profile.k(r) * (r_out.powi(n as i32) - r_in.powi(n as i32)) / nf);
        }
        let inv_weight = weight.iter().map(|w| 1.0 / w).collect();
        let table = profile.k_integral_table(dr, count as f64 * dr)?;
        let k_int = (0..count).map(|i| table.eval(i as f64 * dr)).collect();
        let omega = 2.0 * std::f64::consts::PI.powf(nf / 2.0) / statrs::function::gamma::gamma(nf / 2.0);
        let dt_cfl = cfg.cfl * dr * delta0 * damping.delta1;
        let solver = Self {
            profile: profile.clone(),
            damping: damping.clone(),
            data,
            eps,
            cfg,
            dr,
            count,
            power: Power::new(cfg.p),
            flux,
            weight,
            inv_weight,
            k_int,
            r1,
            omega,
            dt_cfl,
        };
        let u: Vec<f64> = (0..count).map(|i| eps * data.u0(i as f64 * dr)).collect();
        let v: Vec<f64> = (0..count).map(|i| eps * data.u1(i as f64 * dr)).collect();
        let hi = solver.initial_hi();
        let mut state = RadialWaveState {
            t: 0.0,
            s: 0.0,
            u,
            v,
            steps: 0,
            acc: vec![0.0; count],
            hi,
            sup: 0.0,
        };
        state.u[count - 1] = 0.0;
        state.v[count - 1] = 0.0;
        let scale = solver.accel_scale(0.0, 0.0)?;
        solver.accel(&state.u, &mut state.acc, hi, scale, cfg.light_cone_mask);
        state.sup = state.sup_abs();
        Ok((solver, state))
    }

    pub fn profile(&self) -> &MetricProfile {
        &self.profile
    }

    pub fn damping(&self) -> &DampingProfile {
        &self.damping
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn r(&self, i: usize) -> f64 {
        i as f64 * self.dr
    }

    pub fn r_max(&self) -> f64 {
        self.r(self.count - 1)
    }

    /// Largest step allowed by the Courant condition.
    pub fn dt_cfl(&self) -> f64 {
        self.dt_cfl
    }

    /// Quadrature weights of `∫ · K r^{n−1} dr` (without the sphere area).
    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// Physical-time radius of the light cone in `∫K`, widened by one cell.
    fn cone(&self, t: f64) -> f64 {
        t + self.r1 + self.dr / self.profile.delta0
    }

    // Last node inside the cone at time t.
    fn cone_index(&self, t: f64) -> usize {
        let c = self.cone(t);
        let idx = self.k_int.partition_point(|&x| x <= c);
        idx.saturating_sub(1).min(self.count - 2)
    }

    fn initial_hi(&self) -> usize {
        if self.cfg.light_cone_mask {
            self.cone_index(0.0)
        } else {
            // First node where the data vanish.
            ((self.data.r0 / self.dr).ceil() as usize).min(self.count - 2)
        }
    }

    // Factor in front of (Δ_g u + |u|^p): m̃² for the transformed clock, 1 otherwise.
    fn accel_scale(&self, _s: f64, t: f64) -> Result<f64> {
        match self.cfg.formulation {
            Formulation::Transformed if !self.damping.is_zero() => {
                let m = self.damping.m_of_t(t)?;
                Ok(m * m)
            }
            _ => Ok(1.0),
        }
    }

    fn physical_time(&self, s: f64) -> Result<f64> {
        match self.cfg.formulation {
            Formulation::Transformed if !self.damping.is_zero() => self.damping.eta_of_s(s),
            _ => Ok(s),
        }
    }

    /// Evolution-clock value corresponding to physical time `t`.
    pub fn clock_of(&self, t: f64) -> Result<f64> {
        match self.cfg.formulation {
            Formulation::Transformed if !self.damping.is_zero() => self.damping.h_of_t(t),
            _ => Ok(t),
        }
    }

    // With `wall` the flux out of node `hi` is dropped, which confines the
    // solution to nodes 0..=hi without losing any of ∫u.
    fn accel(&self, u: &[f64], a: &mut [f64], hi: usize, scale: f64, wall: bool) {
        let nonlinear = self.cfg.nonlinear;
        let power = self.power;
        let mut left = 0.0;
        for i in 0..=hi {
            let right = if wall && i == hi { 0.0 } else { self.flux[i] * (u[i + 1] - u[i]) };
            let mut x = (right - left) * self.inv_weight[i];
            if nonlinear {
                x += power.eval(u[i]);
            }
            a[i] = scale * x;
            left = right;
        }
    }

    /// Step size: the Courant bound, shortened near blow-up to resolve the
    /// nonlinear time scale.
    pub fn stable_dt(&self, state: &RadialWaveState) -> Result<f64> {
        if !self.cfg.nonlinear {
            return Ok(self.dt_cfl);
        }
        let sup = state.sup;
        if sup == 0.0 {
            return Ok(self.dt_cfl);
        }
        let m2 = self.accel_scale(state.s, state.t)?;
        let rate = m2 * self.cfg.p * sup.powf(self.cfg.p - 1.0);
        Ok(self.dt_cfl.min(self.cfg.kappa / rate.sqrt()))
    }

    /// Advance the evolution clock by `dt`.
    pub fn step(&self, state: &mut RadialWaveState, dt: f64) -> Result<StepStatus> {
        self.step_inner(state, dt, false).map(|(s, _)| s)
    }

    /// Advance by `dt` and return the leapfrog energy at the half step,
    /// `Σ wᵢ(v^{n+1/2})² + Σ K⁻¹r^{n−1}(Δuⁿ/Δr)(Δu^{n+1}/Δr)Δr` times the sphere
    /// area. For the linear undamped problem this is conserved exactly.
    pub fn step_with_energy(&self, state: &mut RadialWaveState, dt: f64) -> Result<(StepStatus, f64)> {
        let (s, e) = self.step_inner(state, dt, true)?;
        Ok((s, e.unwrap_or(f64::NAN)))
    }

    fn step_inner(
        &self,
        state: &mut RadialWaveState,
        dt: f64,
        energy: bool,
    ) -> Result<(StepStatus, Option<f64>)> {
        if !(dt > 0.0) || dt > self.dt_cfl * (1.0 + 1e-12) {
            return Err(Error::Configuration(format!(
                "step {dt} violates the Courant bound {}",
                self.dt_cfl
            )));
        }
        let s_new = state.s + dt;
        let t_new = self.physical_time(s_new)?;
        let mask = self.cfg.light_cone_mask;
        let hi_old = state.hi;
        // Unmasked, the leapfrog stencil reaches one node further per step.
        let hi = if mask { self.cone_index(t_new) } else { hi_old + 1 }
            .max(hi_old)
            .min(self.count - 2);
        let half = 0.5 * dt;
        let u_old: Option<Vec<f64>> = energy.then(|| state.u[..=hi + 1].to_vec());

        // First half-kick and drift.
        let (kick, den) = match self.cfg.formulation {
            Formulation::Direct => (half, 1.0 + half * self.damping.b(state.t)),
            Formulation::Transformed => (half, 1.0),
        };
        let inv_den = 1.0 / den;
        {
            let (u, v, acc) = (&mut state.u[..=hi_old], &mut state.v[..=hi_old], &state.acc[..=hi_old]);
            for ((u, v), a) in u.iter_mut().zip(v.iter_mut()).zip(acc) {
                *v = (*v + kick * a) * inv_den;
                *u += dt * *v;
            }
        }
        let e = u_old.map(|u_old| {
            let kinetic: f64 = (0..=hi).map(|i| self.weight[i] * state.v[i] * state.v[i]).sum();
            let links = if mask { hi } else { hi + 1 };
            let potential: f64 = (0..links)
                .map(|i| self.flux[i] * (u_old[i + 1] - u_old[i]) * (state.u[i + 1] - state.u[i]))
                .sum();
            self.omega * (kinetic + potential)
        });

        // New acceleration fused with the second half-kick.
        let scale = self.accel_scale(s_new, t_new)?;
        let damp = match self.cfg.formulation {
            Formulation::Direct => 1.0 - half * self.damping.b(t_new),
            Formulation::Transformed => 1.0,
        };
        let nonlinear = self.cfg.nonlinear;
        let power = self.power;
        let u = &state.u;
        let mut left = 0.0;
        let mut sup = 0.0f64;
        let mut check = 0.0;
        for i in 0..=hi {
            let ui = u[i];
            let right = if mask && i == hi { 0.0 } else { self.flux[i] * (u[i + 1] - ui) };
            let mut x = (right - left) * self.inv_weight[i];
            if nonlinear {
                x += power.eval(ui);
            }
            let a = scale * x;
            state.acc[i] = a;
            let v = state.v[i] * damp + half * a;
            state.v[i] = v;
            left = right;
            sup = sup.max(ui.abs());
            check += v;
        }
        state.s = s_new;
        state.t = t_new;
        state.steps += 1;
        state.hi = hi;
        state.sup = sup;
        // NaN or infinity anywhere poisons the running sum.
        let finite = (check + sup).is_finite() && !sup.is_nan();
        let status = if finite { StepStatus::Finite } else { StepStatus::NonFinite };
        Ok((status, e))
    }

    /// Step with the stable step size until physical time `t`, landing on it exactly.
    pub fn advance_to(&self, state: &mut RadialWaveState, t: f64) -> Result<StepStatus> {
        let target = self.clock_of(t)?;
        while state.s < target {
            let dt = self.stable_dt(state)?;
            let dt = if state.s + dt * (1.0 + 1e-9) >= target { target - state.s } else { dt };
            if dt <= 0.0 {
                break;
            }
            if self.step(state, dt)? == StepStatus::NonFinite {
                return Ok(StepStatus::NonFinite);
            }
        }
        Ok(StepStatus::Finite)
    }

    /// `F = ∫u dv_g`.
    pub fn functional_f(&self, state: &RadialWaveState) -> f64 {
        self.omega * (0..=state.hi).map(|i| self.weight[i] * state.u[i]).sum::<f64>()
    }

    /// `∫∂u dv_g` with `∂` the evolution-clock derivative.
    pub fn functional_df(&self, state: &RadialWaveState) -> f64 {
        self.omega * (0..=state.hi).map(|i| self.weight[i] * state.v[i]).sum::<f64>()
    }

    /// `∫|u|^p dv_g`.
    pub fn source_integral(&self, state: &RadialWaveState) -> f64 {
        self.omega * (0..=state.hi).map(|i| self.weight[i] * self.power.eval(state.u[i])).sum::<f64>()
    }

    /// Second derivative of `F` in the evolution clock from the equation:
    /// `m̃²∫|u|^p` when transformed, `∫|u|^p − bF′` when direct.
    pub fn functional_f_second(&self, state: &RadialWaveState) -> Result<f64> {
        let source = if self.cfg.nonlinear { self.source_integral(state) } else { 0.0 };
        match self.cfg.formulation {
            Formulation::Transformed => Ok(self.accel_scale(state.s, state.t)? * source),
            Formulation::Direct => Ok(source - self.damping.b(state.t) * self.functional_df(state)),
        }
    }

    /// `H = ∫u e^{−λη(t)}φ dv_g`.
    pub fn functional_h(&self, state: &RadialWaveState, phi: &TestFunction) -> Result<f64> {
        self.check_test_function(phi)?;
        let shift = phi.lambda * state.t;
        Ok(self.omega
            * (0..=state.hi)
                .map(|i| self.weight[i] * state.u[i] * (phi.log_phi[i] - shift).exp())
                .sum::<f64>())
    }

    /// `G = ∫uφ dv_g`; overflows to infinity once `λη(t)` exceeds the float range.
    pub fn functional_g(&self, state: &RadialWaveState, phi: &TestFunction) -> Result<f64> {
        self.check_test_function(phi)?;
        Ok(self.omega
            * (0..=state.hi)
                .filter(|&i| state.u[i] != 0.0)
                .map(|i| self.weight[i] * state.u[i] * phi.log_phi[i].exp())
                .sum::<f64>())
    }

    fn check_test_function(&self, phi: &TestFunction) -> Result<()> {
        if phi.log_phi.len() != self.count {
            return Err(Error::InsufficientDomain(format!(
                "test function has {} nodes, solver grid has {}",
                phi.log_phi.len(),
                self.count
            )));
        }
        Ok(())
    }

    /// Measured support and its slack against the light cone.
    pub fn support(&self, state: &RadialWaveState) -> SupportReport {
        let hi = (state.hi + 1).min(self.count - 1);
        let (mu, mv) = (0..=hi).fold((0.0f64, 0.0f64), |(a, b), i| {
            (a.max(state.u[i].abs()), b.max(state.v[i].abs()))
        });
        let last = (0..=hi)
            .rev()
            .find(|&i| {
                (mu > 0.0 && state.u[i].abs() >= SUPPORT_THRESHOLD * mu)
                    || (mv > 0.0 && state.v[i].abs() >= SUPPORT_THRESHOLD * mv)
            });
        let (edge, k_edge) = match last {
            Some(i) => {
                let j = (i + 1).min(self.count - 1);
                (self.r(j), self.k_int[j])
            }
            None => (0.0, 0.0),
        };
        SupportReport {
            t: state.t,
            edge,
            slack: state.t + self.r1 - k_edge,
            tolerance: 2.0 * self.dr / self.profile.delta0,
        }
    }

    /// Support report, failing when the slack falls below `−2Δr/δ₀`.
    pub fn check_support(&self, state: &RadialWaveState) -> Result<SupportReport> {
        let rep = self.support(state);
        if rep.slack < -rep.tolerance {
            return Err(Error::FiniteSpeedViolation {
                t: rep.t,
                slack: rep.slack,
                tolerance: rep.tolerance,
            });
        }
        Ok(rep)
    }

    /// Evolve until blow-up is located, a non-finite value appears, or the
    /// budget `t_max` is spent, sampling the functionals along the way.
    pub fn run(&self, state: &mut RadialWaveState, opts: &RunOptions) -> Result<Trajectory> {
        let mut samples = Vec::new();
        let levels = opts.blowup_levels.map(|l| l.map(|x| x * self.eps));
        let mut crossings: Vec<f64> = Vec::new();
        let mut sup_prev = state.sup_abs();
        let mut t_prev = state.t;
        let s_end = self.clock_of(self.cfg.t_max)?;
        samples.push(self.sample(state, opts.test_function)?);
        let mut next_sample = match opts.sampling {
            Sampling::Geometric { start, factor } if start > 0.0 && factor > 1.0 => start,
            Sampling::Geometric { .. } => {
                return Err(Error::Configuration("geometric sampling needs start > 0 and factor > 1".into()))
            }
            _ => f64::INFINITY,
        };
        let outcome = loop {
            if state.s >= s_end * (1.0 - 1e-14) {
                break RunOutcome::BudgetExhausted;
            }
            let mut dt = self.stable_dt(state)?;
            if state.s + dt > s_end {
                dt = s_end - state.s;
            }
            if dt < 1e-14 * state.s.max(1.0) {
                break RunOutcome::StepCollapse;
            }
            if self.step(state, dt)? == StepStatus::NonFinite {
                break RunOutcome::NonFinite;
            }
            let sup = state.sup;
            if let Some(levels) = levels {
                while crossings.len() < 3 && sup >= levels[crossings.len()] {
                    let lvl = levels[crossings.len()];
                    let frac = if sup_prev > 0.0 && sup > sup_prev {
                        ((lvl.ln() - sup_prev.ln()) / (sup.ln() - sup_prev.ln())).clamp(0.0, 1.0)
                    } else {
                        1.0
                    };
                    crossings.push(t_prev + frac * (state.t - t_prev));
                }
                if crossings.len() == 3 {
                    break RunOutcome::BlowUp;
                }
            }
            sup_prev = sup;
            t_prev = state.t;
            let due = match opts.sampling {
                Sampling::Ends => false,
                Sampling::EverySteps(k) => k > 0 && state.steps.is_multiple_of(k),
                Sampling::Geometric { factor, .. } => {
                    let due = state.t >= next_sample;
                    while next_sample <= state.t {
                        next_sample *= factor;
                    }
                    due
                }
            };
            if due {
                samples.push(self.sample(state, opts.test_function)?);
            }
        };
        if outcome != RunOutcome::NonFinite
            && samples.last().map(|s| s.t) != Some(state.t)
        {
            samples.push(self.sample(state, opts.test_function)?);
        }
        let blowup = (crossings.len() == 3).then(|| BlowupEstimate::from_crossings([
            crossings[0],
            crossings[1],
            crossings[2],
        ]));
        Ok(Trajectory {
            samples,
            outcome,
            blowup,
            crossings,
            steps: state.steps,
            t_end: state.t,
        })
    }

    pub fn sample(&self, state: &RadialWaveState, phi: Option<&TestFunction>) -> Result<Sample> {
        let support = self.support(state);
        let (h, g) = match phi {
            Some(phi) => (Some(self.functional_h(state, phi)?), Some(self.functional_g(state, phi)?)),
            None => (None, None),
        };
        Ok(Sample {
            t: state.t,
            s: state.s,
            f: self.functional_f(state),
            f_second: self.functional_f_second(state)?,
            h,
            g,
            sup_u: state.sup_abs(),
            support_edge: support.edge,
            slack: support.slack,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Sampling {
    /// Only the first and last states.
    #[default]
    Ends,
    EverySteps(usize),
    /// At times `start·factorᵏ`, at most once per step.
    Geometric { start: f64, factor: f64 },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub sampling: Sampling,
    /// Multiples of `ε` that `sup|u|` must cross to declare blow-up.
    pub blowup_levels: Option<[f64; 3]>,
    pub test_function: Option<&'a TestFunction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    BlowUp,
    BudgetExhausted,
    NonFinite,
    /// The nonlinear step limit shrank below round-off.
    StepCollapse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub t: f64,
    pub s: f64,
    pub f: f64,
    pub f_second: f64,
    pub h: Option<f64>,
    pub g: Option<f64>,
    pub sup_u: f64,
    pub support_edge: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlowupEstimate {
    pub crossings: [f64; 3],
    /// Aitken extrapolation of the crossing times; the last crossing when the
    /// gaps do not shrink.
    pub t_blowup: f64,
}

impl BlowupEstimate {
    pub fn from_crossings(c: [f64; 3]) -> Self {
        let d1 = c[1] - c[0];
        let d2 = c[2] - c[1];
        let t_blowup = if d2 >= 0.0 && d1 > d2 { c[2] + d2 * d2 / (d1 - d2) } else { c[2] };
        Self { crossings: c, t_blowup }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub outcome: RunOutcome,
    pub blowup: Option<BlowupEstimate>,
    pub crossings: Vec<f64>,
    pub steps: usize,
    /// Physical time when the run stopped.
    pub t_end: f64,
}

impl Trajectory {
    pub fn min_slack(&self) -> f64 {
        self.samples.iter().map(|s| s.slack).fold(f64::INFINITY, f64::min)
    }
}

/// Infima over sampled times of the ratios between the functionals and the
/// lower bounds driving blow-up. `None` where `H` was not sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InequalityReport {
    pub samples: usize,
    /// `F″(1+t)^{n(p−1)} / |F|^p`.
    pub f_second_vs_f: f64,
    /// `F″ / (|H|^p (1+t)^{(n−1)(1−p/2)})`.
    pub f_second_vs_h: Option<f64>,
    /// `H / ε`.
    pub h_over_eps: Option<f64>,
    /// `F / (ε^p (1+t)^{2+(n−1)(1−p/2)})`.
    pub f_vs_eps_power: f64,
    /// `F / (εt)`.
    pub f_over_eps_t: f64,
    /// Smallest sampled `F″`; nonnegative data on a flat metric keep `F` convex.
    pub min_f_second: f64,
}

/// Ratios over the samples with `t` in `[t_from, t_to)`.
pub fn check_inequalities(
    traj: &Trajectory,
    n: usize,
    p: f64,
    eps: f64,
    t_from: f64,
    t_to: f64,
) -> Result<InequalityReport> {
    let picked: Vec<&Sample> = traj.samples.iter().filter(|s| s.t >= t_from && s.t < t_to).collect();
    if picked.is_empty() {
        return Err(Error::InsufficientData(format!("no samples in [{t_from}, {t_to})")));
    }
    let nf = n as f64;
    let inf = |f: &dyn Fn(&Sample) -> f64| picked.iter().map(|s| f(s)).fold(f64::INFINITY, f64::min);
    let h_exp = (nf - 1.0) * (1.0 - p / 2.0);
    let has_h = picked.iter().all(|s| s.h.is_some());
    let h = |s: &Sample| s.h.unwrap_or(f64::NAN);
    Ok(InequalityReport {
        samples: picked.len(),
        f_second_vs_f: inf(&|s| s.f_second * (1.0 + s.t).powf(nf * (p - 1.0)) / s.f.abs().powf(p)),
        f_second_vs_h: has_h.then(|| inf(&|s| s.f_second / (h(s).abs().powf(p) * (1.0 + s.t).powf(h_exp)))),
        h_over_eps: has_h.then(|| inf(&|s| h(s) / eps)),
        f_vs_eps_power: inf(&|s| s.f / (eps.powf(p) * (1.0 + s.t).powf(2.0 + h_exp))),
        f_over_eps_t: inf(&|s| s.f / (eps * s.t)),
        min_f_second: picked.iter().map(|s| s.f_second).fold(f64::INFINITY, f64::min),
    })
}

/// `u` at a list of physical times, on the solver nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    pub times: Vec<f64>,
    pub dr: f64,
    pub fields: Vec<Vec<f64>>,
}

impl FieldSeries {
    /// Largest pointwise difference over all common times and nodes.
    pub fn sup_distance(&self, other: &FieldSeries) -> f64 {
        self.fields
            .iter()
            .zip(&other.fields)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

fn evolve_fields(
    profile: &MetricProfile,
    damping: &DampingProfile,
    data: DataProfile,
    eps: f64,
    cfg: SolverConfig,
    times: &[f64],
) -> Result<FieldSeries> {
    let (solver, mut state) = WaveSolver::init(profile, damping, data, eps, cfg)?;
    let mut fields = Vec::with_capacity(times.len());
    for &t in times {
        if solver.advance_to(&mut state, t)? == StepStatus::NonFinite {
            return Err(Error::Overflow(state.t));
        }
        fields.push(state.u.clone());
    }
    Ok(FieldSeries {
        times: times.to_vec(),
        dr: solver.dr,
        fields,
    })
}

/// Fields of `∂²ₜu − Δ_g u + b∂ₜu = |u|^p` at the given physical times.
pub fn evolve_damped_direct(
    profile: &MetricProfile,
    damping: &DampingProfile,
    data: DataProfile,
    eps: f64,
    cfg: SolverConfig,
    times: &[f64],
) -> Result<FieldSeries> {
    let cfg = SolverConfig {
        formulation: Formulation::Direct,
        ..cfg
    };
    evolve_fields(profile, damping, data, eps, cfg, times)
}

/// Fields of `∂²ₛu = m̃²(Δ_g u + |u|^p)` read at `s = h(t)` for the given physical times.
pub fn evolve_transformed(
    profile: &MetricProfile,
    damping: &DampingProfile,
    data: DataProfile,
    eps: f64,
    cfg: SolverConfig,
    times: &[f64],
) -> Result<FieldSeries> {
    let cfg = SolverConfig {
        formulation: Formulation::Transformed,
        ..cfg
    };
    evolve_fields(profile, damping, data, eps, cfg, times)
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"AEBW";
const SNAPSHOT_VERSION: u32 = 1;

/// Full-field frames in a little-endian binary stream: a header with
/// `n`, node count and `Δr`, then frames of `t`, `s`, `u`, `v`.
pub struct SnapshotWriter<W: Write> {
    out: W,
    count: usize,
}

impl<W: Write> SnapshotWriter<W> {
    pub fn new(mut out: W, n: usize, count: usize, dr: f64) -> io::Result<Self> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&(n as u32).to_le_bytes())?;
        out.write_all(&(count as u64).to_le_bytes())?;
        out.write_all(&dr.to_le_bytes())?;
        Ok(Self { out, count })
    }

    pub fn write_frame(&mut self, state: &RadialWaveState) -> io::Result<()> {
        if state.u.len() != self.count {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame size mismatch"));
        }
        self.out.write_all(&state.t.to_le_bytes())?;
        self.out.write_all(&state.s.to_le_bytes())?;
        for x in state.u.iter().chain(&state.v) {
            self.out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotFrame {
    pub t: f64,
    pub s: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshots {
    pub n: usize,
    pub dr: f64,
    pub frames: Vec<SnapshotFrame>,
}

pub fn read_snapshots(mut input: impl Read) -> io::Result<Snapshots> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    if buf.len() < 28 || &buf[..4] != SNAPSHOT_MAGIC {
        return Err(bad("not a snapshot stream"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    if u32_at(4) != SNAPSHOT_VERSION {
        return Err(bad("unsupported snapshot version"));
    }
    let n = u32_at(8) as usize;
    let count = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let dr = f64_at(20);
    let frame_len = 8 * (2 + 2 * count);
    let body = &buf[28..];
    if body.len() % frame_len != 0 {
        return Err(bad("truncated frame"));
    }
    let frames = body
        .chunks(frame_len)
        .map(|c| {
            let vals: Vec<f64> = c.chunks(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            SnapshotFrame {
                t: vals[0],
                s: vals[1],
                u: vals[2..2 + count].to_vec(),
                v: vals[2 + count..].to_vec(),
            }
        })
        .collect();
    Ok(Snapshots { n, dr, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat3() -> MetricProfile {
        MetricProfile::flat(3).unwrap()
    }

    fn linear(dr: f64, t_max: f64) -> SolverConfig {
        SolverConfig {
            dr,
            t_max,
            nonlinear: false,
            ..SolverConfig::default()
        }
    }

    // Spherical-means solution of the 3-d linear wave equation for radial data:
    // r·u(t, r) = ½[(r−t)f(r−t) + (r+t)f(r+t)] + ½∫_{r−t}^{r+t} s·g(s) ds,
    // with s·f(s), s·g(s) extended oddly.
    fn dalembert(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64, t: f64, r: f64) -> f64 {
        let sf = |s: f64| s * f(s.abs());
        let sg = |s: f64| s * g(s.abs());
        let (a, b) = (r - t, r + t);
        // Composite Simpson with many panels; the integrand is a polynomial on each piece.
        let m = 4000;
        let h = (b - a) / m as f64;
        let mut acc = sg(a) + sg(b);
        for k in 1..m {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * sg(a + k as f64 * h);
        }
        let integral = acc * h / 3.0;
        if r == 0.0 {
            return f64::NAN;
        }
        (0.5 * (sf(a) + sf(b)) + 0.5 * integral) / r
    }

    #[test]
    fn zero_data_stays_zero() {
        let (solver, mut state) = WaveSolver::init(
            &flat3(),
            &DampingProfile::zero(),
            DataProfile::new(DataShape::Both, 1.0).unwrap(),
            0.0,
            SolverConfig::default(),
        )
        .unwrap();
        solver.advance_to(&mut state, 2.0).unwrap();
        assert!(state.u.iter().all(|&x| x == 0.0));
        assert_eq!(solver.functional_f(&state), 0.0);
        let phi = TestFunction::new(&solver, 0.5).unwrap();
        assert_eq!(solver.functional_h(&state, &phi).unwrap(), 0.0);
        assert_eq!(solver.functional_g(&state, &phi).unwrap(), 0.0);
    }

    #[test]
    fn r1_flat_and_power_law() {
        let data = DataProfile::new(DataShape::U1, 1.0).unwrap();
        let (s, _) =
            WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 0.1, SolverConfig::default()).unwrap();
        assert_relative_eq!(s.r1, 1.0, max_relative = 1e-14);
        let pl = MetricProfile::power_law(3, 0.5, 1.0).unwrap();
        let (s, _) = WaveSolver::init(&pl, &DampingProfile::zero(), data, 0.1, SolverConfig::default()).unwrap();
        assert_relative_eq!(s.r1, 1.0 + 0.5 * 1f64.asinh(), max_relative = 1e-12);
    }

    #[test]
    fn rejects_short_domain_and_large_courant() {
        let data = DataProfile::new(DataShape::U1, 1.0).unwrap();
        let cfg = SolverConfig {
            r_max: Some(5.0),
            t_max: 10.0,
            ..SolverConfig::default()
        };
        let e = WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 0.1, cfg).unwrap_err();
        assert!(matches!(e, Error::Configuration(_)));
        let cfg = SolverConfig {
            cfl: 0.6,
            ..SolverConfig::default()
        };
        assert!(matches!(
            WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 0.1, cfg),
            Err(Error::Configuration(_))
        ));
        let (solver, mut state) =
            WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 0.1, SolverConfig::default()).unwrap();
        let dt = solver.dt_cfl() * 1.01;
        assert!(matches!(solver.step(&mut state, dt), Err(Error::Configuration(_))));
    }

    #[test]
    fn dalembert_oracle_second_order() {
        let data = DataProfile::new(DataShape::Both, 1.0).unwrap();
        let t_end = 3.0;
        let err = |dr: f64| {
            let (solver, mut state) =
                WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 1.0, linear(dr, 4.0)).unwrap();
            solver.advance_to(&mut state, t_end).unwrap();
            let mut e = 0.0f64;
            let mut i = 1;
            while i < solver.count() && solver.r(i) <= 6.0 {
                let r = solver.r(i);
                if ((r * 10.0).round() - r * 10.0).abs() < 1e-6 {
                    let exact = dalembert(|x| data.bump(x), |x| data.bump(x), t_end, r);
                    e = e.max((state.u[i] - exact).abs());
                }
                i += 1;
            }
            e
        };
        let (e1, e2, e3) = (err(0.02), err(0.01), err(0.005));
        let o1 = (e1 / e2).log2();
        let o2 = (e2 / e3).log2();
        assert!(e3 < 2e-4, "finest error {e3}");
        assert!(o1 > 1.8 && o2 > 1.8, "orders {o1} {o2} (errors {e1} {e2} {e3})");
    }

    fn energy_drift(profile: &MetricProfile, dr: f64, mask: bool) -> f64 {
        let data = DataProfile::new(DataShape::Both, 1.0).unwrap();
        let cfg = SolverConfig {
            light_cone_mask: mask,
            ..linear(dr, 10.0)
        };
        let (solver, mut state) = WaveSolver::init(profile, &DampingProfile::zero(), data, 1.0, cfg).unwrap();
        let dt = solver.dt_cfl();
        let (_, e0) = solver.step_with_energy(&mut state, dt).unwrap();
        let mut drift = 0.0f64;
        while state.t < 10.0 {
            let (_, e) = solver.step_with_energy(&mut state, dt).unwrap();
            drift = drift.max(((e - e0) / e0).abs());
        }
        drift
    }

    #[test]
    fn linear_energy_conserved() {
        for profile in [flat3(), MetricProfile::power_law(3, 0.5, 1.0).unwrap()] {
            let drift = energy_drift(&profile, 0.02, false);
            assert!(drift < 1e-6, "relative energy drift {drift}");
        }
    }

    #[test]
    fn light_cone_wall_energy_defect_vanishes_fast() {
        // The moving wall only reflects the dispersive precursor, so its energy
        // defect shrinks faster than the O(Δr²) discretization error.
        let profile = flat3();
        let (e1, e2, e3) = (
            energy_drift(&profile, 0.04, true),
            energy_drift(&profile, 0.02, true),
            energy_drift(&profile, 0.01, true),
        );
        assert!((e1 / e2).log2() > 3.0 && (e2 / e3).log2() > 3.0, "defects {e1} {e2} {e3}");
        assert!(e3 < 1e-5);
    }

    #[test]
    fn f_at_time_zero_matches_quadrature() {
        let data = DataProfile::new(DataShape::U0, 1.0).unwrap();
        let pl = MetricProfile::power_law(3, 0.5, 1.0).unwrap();
        let eps = 0.3;
        // Simpson on [0, 1] of 4π r² K(r) (1 − r²)⁴.
        let g = |r: f64| 4.0 * std::f64::consts::PI * r * r * (1.0 + 0.5 / (1.0 + r * r).sqrt()) * (1.0 - r * r).powi(4);
        let m = 2000;
        let h = 1.0 / m as f64;
        let simpson = (g(0.0) + g(1.0) + (1..m).map(|k| if k % 2 == 1 { 4.0 } else { 2.0 } * g(k as f64 * h)).sum::<f64>()) * h / 3.0;
        let mut prev = f64::NAN;
        for dr in [0.01, 0.005] {
            let (solver, state) =
                WaveSolver::init(&pl, &DampingProfile::zero(), data, eps, SolverConfig { dr, ..SolverConfig::default() }).unwrap();
            let f = solver.functional_f(&state);
            let err = (f - eps * simpson).abs();
            assert!(err < 5.0 * dr * dr * eps, "dr {dr}: F(0) = {f}, oracle {}", eps * simpson);
            if prev.is_finite() {
                assert!(err < prev / 3.0);
            }
            prev = err;
        }
    }

    #[test]
    fn support_at_start_and_under_unit_speed() {
        let data = DataProfile::new(DataShape::U0, 1.0).unwrap();
        let (solver, mut state) =
            WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 0.1, linear(0.01, 5.0)).unwrap();
        let rep = solver.check_support(&state).unwrap();
        assert_relative_eq!(rep.edge, 1.0, max_relative = 1e-12);
        assert!(rep.slack.abs() < 1e-12);
        solver.advance_to(&mut state, 3.0).unwrap();
        let rep = solver.check_support(&state).unwrap();
        assert!(rep.edge <= 4.0 + 2.0 * 0.01 / 0.99 + 1e-12, "edge {}", rep.edge);
        assert!(rep.edge > 3.9);
    }

    #[test]
    fn unmasked_halo_is_reported() {
        let data = DataProfile::new(DataShape::U0, 1.0).unwrap();
        let cfg = SolverConfig {
            light_cone_mask: false,
            ..linear(0.05, 5.0)
        };
        let (solver, mut state) = WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 1.0, cfg).unwrap();
        solver.advance_to(&mut state, 3.0).unwrap();
        assert!(matches!(solver.check_support(&state), Err(Error::FiniteSpeedViolation { .. })));
    }

    #[test]
    fn f_second_identity_is_exact_per_step() {
        // Nothing crosses the wall or the outer boundary, so the second difference
        // of F equals m̃²∫|u|^p up to round-off, with or without the mask.
        for mask in [true, false] {
            let data = DataProfile::new(DataShape::Both, 1.0).unwrap();
            let cfg = SolverConfig {
                dr: 0.02,
                light_cone_mask: mask,
                ..SolverConfig::default()
            };
            let (solver, mut state) = WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 0.5, cfg).unwrap();
            let dt = solver.dt_cfl();
            let mut f = vec![solver.functional_f(&state)];
            let mut fs = vec![solver.functional_f_second(&state).unwrap()];
            for _ in 0..400 {
                solver.step(&mut state, dt).unwrap();
                f.push(solver.functional_f(&state));
                fs.push(solver.functional_f_second(&state).unwrap());
            }
            for k in 1..f.len() - 1 {
                let fd = (f[k + 1] - 2.0 * f[k] + f[k - 1]) / (dt * dt);
                assert!((fd - fs[k]).abs() < 1e-8 * fs[k].abs().max(1.0), "step {k}: {fd} vs {}", fs[k]);
            }
        }
    }

    #[test]
    fn f_second_identity_second_order_in_sample_spacing() {
        let data = DataProfile::new(DataShape::Both, 1.0).unwrap();
        let cfg = SolverConfig {
            dr: 0.02,
            ..SolverConfig::default()
        };
        let (solver, mut state) = WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 0.5, cfg).unwrap();
        let dt = solver.dt_cfl();
        let mut f = vec![solver.functional_f(&state)];
        let mut fs = vec![solver.functional_f_second(&state).unwrap()];
        for _ in 0..1200 {
            solver.step(&mut state, dt).unwrap();
            f.push(solver.functional_f(&state));
            fs.push(solver.functional_f_second(&state).unwrap());
        }
        let err = |k: usize| {
            let h = k as f64 * dt;
            (1..12)
                .map(|j| {
                    let c = 100 * j;
                    ((f[c + k] - 2.0 * f[c] + f[c - k]) / (h * h) - fs[c]).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (err(5), err(10), err(20));
        let (o1, o2) = ((e2 / e1).log2(), (e3 / e2).log2());
        assert!(o1 > 1.8 && o2 > 1.8, "orders {o1} {o2} (errors {e1} {e2} {e3})");
    }

    #[test]
    fn zero_damping_formulations_coincide() {
        let data = DataProfile::new(DataShape::Both, 1.0).unwrap();
        let cfg = SolverConfig {
            dr: 0.02,
            t_max: 3.0,
            ..SolverConfig::default()
        };
        let times = [1.0, 2.0, 3.0];
        let z = DampingProfile::zero();
        let a = evolve_damped_direct(&flat3(), &z, data, 0.2, cfg, &times).unwrap();
        let b = evolve_transformed(&flat3(), &z, data, 0.2, cfg, &times).unwrap();
        assert_eq!(a.sup_distance(&b), 0.0);
    }

    #[test]
    fn aitken_recovers_geometric_limit() {
        // Gaps shrinking tenfold converge to 1.
        let c = [0.9, 0.99, 0.999];
        assert_relative_eq!(BlowupEstimate::from_crossings(c).t_blowup, 1.0, max_relative = 1e-12);
        assert_eq!(BlowupEstimate::from_crossings([1.0, 2.0, 3.0]).t_blowup, 3.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let data = DataProfile::new(DataShape::U0, 1.0).unwrap();
        let (solver, mut state) =
            WaveSolver::init(&flat3(), &DampingProfile::zero(), data, 0.1, linear(0.1, 1.0)).unwrap();
        let mut w = SnapshotWriter::new(Vec::new(), 3, solver.count(), solver.dr).unwrap();
        w.write_frame(&state).unwrap();
        solver.advance_to(&mut state, 0.5).unwrap();
        w.write_frame(&state).unwrap();
        let snap = read_snapshots(&w.into_inner()[..]).unwrap();
        assert_eq!(snap.n, 3);
        assert_eq!(snap.frames.len(), 2);
        assert_eq!(snap.frames[1].u, state.u);
        assert_eq!(snap.frames[1].t, 0.5);
        assert!(read_snapshots(&b"nope"[..]).is_err());
    }
}
