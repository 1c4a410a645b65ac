//! Positive radial solutions of `Δ_g Φ = λ²Φ`, normalized by `Φ(1/λ) = 1`.
//!
//! The radial equation `Φ″ + ((n−1)/r − K′/K)Φ′ = λ²K²Φ` is integrated in the
//! variables `L = log Φ` and `w = Φ′/Φ`, which satisfy the Riccati system
//! `L′ = w`, `w′ = λ²K² − ((n−1)/r − K′/K)w − w²`. The logarithmic form never
//! overflows and keeps the relative accuracy of `Φ` uniform in `r`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metric::{validate_long_range, MetricProfile};
use crate::ode::{Dopri5, OdeOptions};

/// Start of integration in units of `1/λ`; the even Taylor expansion is used below it.
const ORIGIN_OFFSET: f64 = 1e-4;

/// Uniform radial grid `r_i = i·dr`, `i < count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RadialGrid {
    pub dr: f64,
    pub count: usize,
}

impl RadialGrid {
    pub fn new(dr: f64, r_max: f64) -> Result<Self> {
        if !(dr > 0.0 && r_max > 0.0 && dr.is_finite() && r_max.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "grid spacing {dr} and extent {r_max} must be positive"
            )));
        }
        Ok(Self {
            dr,
            count: (r_max / dr).round() as usize + 1,
        })
    }

    /// Grid resolving both the metric scale and the scale `1/λ`.
    pub fn for_lambda(lambda: f64, r_max: f64) -> Result<Self> {
        Self::new((0.005 / lambda).min(0.02), r_max)
    }

    #[inline]
    pub fn r(&self, i: usize) -> f64 {
        i as f64 * self.dr
    }

    pub fn r_max(&self) -> f64 {
        self.r(self.count - 1)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.r(i)).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-11,
            atol: 1e-14,
        }
    }
}

/// One eigenfunction sampled on a uniform grid, stored as `log Φ` and `Φ′/Φ`.
#[derive(Debug, Clone)]
pub struct EntireSolution {
    pub lambda: f64,
    pub n: usize,
    pub grid: RadialGrid,
    pub log_phi: Vec<f64>,
    pub dlog_phi: Vec<f64>,
    /// `Φ′/Φ` at `r = 1/λ`, where `log Φ = 0`.
    pub dlog_phi_at_norm: f64,
    profile: MetricProfile,
}

impl EntireSolution {
    pub fn profile(&self) -> &MetricProfile {
        &self.profile
    }

    pub fn len(&self) -> usize {
        self.log_phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_phi.is_empty()
    }

    pub fn r(&self, i: usize) -> f64 {
        self.grid.r(i)
    }

    pub fn phi(&self, i: usize) -> f64 {
        self.log_phi[i].exp()
    }

    pub fn dphi(&self, i: usize) -> f64 {
        self.dlog_phi[i] * self.phi(i)
    }

    /// `Φ″/Φ` from the equation, using the regular limit at the origin.
    pub fn d2phi_over_phi(&self, i: usize) -> f64 {
        let r = self.r(i);
        let (k, dk, _) = self.profile.k3(r);
        let l2 = self.lambda * self.lambda;
        if r == 0.0 {
            return l2 * k * k / self.n as f64;
        }
        let coef = (self.n as f64 - 1.0) / r - dk / k;
        l2 * k * k - coef * self.dlog_phi[i]
    }

    pub fn d2phi(&self, i: usize) -> f64 {
        self.d2phi_over_phi(i) * self.phi(i)
    }

    /// `log Φ(r)` by cubic Hermite interpolation with the stored `Φ′/Φ`.
    pub fn log_phi_at(&self, r: f64) -> f64 {
        hermite_log(self.grid, &self.log_phi, &self.dlog_phi, r)
    }

    /// Index of the last node with `r ≤ 1/λ`.
    pub fn interior_end(&self) -> usize {
        (((1.0 / self.lambda) / self.grid.dr).floor() as usize).min(self.len() - 1)
    }

    /// `log y` with `y = r^{(n−1)/2} K^{−1/2} Φ`.
    pub fn log_y(&self, r: f64, log_phi: f64) -> f64 {
        0.5 * (self.n as f64 - 1.0) * r.ln() - 0.5 * self.profile.k(r).ln() + log_phi
    }
}

fn hermite_log(grid: RadialGrid, l: &[f64], w: &[f64], r: f64) -> f64 {
    let last = l.len() - 1;
    let x = r / grid.dr;
    let i = (x.floor().max(0.0) as usize).min(last - 1);
    let t = x - i as f64;
    let (p0, p1) = (l[i], l[i + 1]);
    let (m0, m1) = (w[i] * grid.dr, w[i + 1] * grid.dr);
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * p0
        + (t3 - 2.0 * t2 + t) * m0
        + (-2.0 * t3 + 3.0 * t2) * p1
        + (t3 - t2) * m1
}

/// Eigenfunction builder for one metric, carrying the admissible range `(0, λ₀]`.
#[derive(Debug, Clone)]
pub struct EigenSolver {
    profile: MetricProfile,
    lambda0: f64,
    opts: EigenOptions,
}

/// `λ₀ = min(1/R₂, 1)` with `R₂` measured on `[0, max(10/ρ, 100)]`.
pub fn lambda0(profile: &MetricProfile) -> Result<f64> {
    let r_max = (10.0 / profile.rho).max(100.0);
    let grid = RadialGrid::new(0.01, r_max)?.nodes();
    let report = validate_long_range(profile, &grid)?;
    if !report.r2.is_finite() {
        return Err(Error::OutOfRange(
            "n - 1 - rK'/K stays negative on the validation grid".into(),
        ));
    }
    Ok(if report.r2 > 0.0 {
        (1.0 / report.r2).min(1.0)
    } else {
        1.0
    })
}

impl EigenSolver {
    pub fn new(profile: MetricProfile, opts: EigenOptions) -> Result<Self> {
        let lambda0 = lambda0(&profile)?;
        Ok(Self {
            profile,
            lambda0,
            opts,
        })
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn profile(&self) -> &MetricProfile {
        &self.profile
    }

    fn check_lambda(&self, lambda: f64) -> Result<()> {
        if !(lambda > 0.0 && lambda <= self.lambda0 * (1.0 + 1e-12)) {
            return Err(Error::OutOfRange(format!(
                "lambda = {lambda} must lie in (0, {}]",
                self.lambda0
            )));
        }
        Ok(())
    }

    /// Solution on the nodes of `[0, 1/λ]`, normalized so `Φ(1/λ) = 1`.
    pub fn build_interior(&self, lambda: f64, grid: RadialGrid) -> Result<EntireSolution> {
        self.check_lambda(lambda)?;
        let r_norm = 1.0 / lambda;
        let last = ((r_norm / grid.dr).floor() as usize).min(grid.count - 1);
        let (mut l, w, at_end) = integrate_from_origin(&self.profile, lambda, grid, last, r_norm, self.opts)?;
        for v in &mut l {
            *v -= at_end[0];
        }
        Ok(EntireSolution {
            lambda,
            n: self.profile.n,
            grid,
            log_phi: l,
            dlog_phi: w,
            dlog_phi_at_norm: at_end[1],
            profile: self.profile.clone(),
        })
    }

    /// Continue an interior solution to the end of its grid (at least `10/λ`).
    pub fn extend_exterior(&self, mut interior: EntireSolution) -> Result<EntireSolution> {
        let grid = interior.grid;
        let lambda = interior.lambda;
        if grid.r_max() < 10.0 / lambda * (1.0 - 1e-12) {
            return Err(Error::InsufficientDomain(format!(
                "exterior must reach 10/lambda = {}, grid ends at {}",
                10.0 / lambda,
                grid.r_max()
            )));
        }
        let r_norm = 1.0 / lambda;
        let first = interior.len();
        let state = [0.0, interior.dlog_phi_at_norm];
        let (l, w) = integrate_segment(
            &self.profile,
            lambda,
            r_norm,
            state,
            grid,
            first..grid.count,
            grid.r_max(),
            self.opts,
        )?
        .0;
        interior.log_phi.extend(l);
        interior.dlog_phi.extend(w);
        Ok(interior)
    }

    pub fn build(&self, lambda: f64, grid: RadialGrid) -> Result<EntireSolution> {
        let interior = self.build_interior(lambda, grid)?;
        self.extend_exterior(interior)
    }

    /// Solutions for every `λ` on one shared grid, computed in parallel.
    pub fn build_family(&self, lambdas: &[f64], grid: RadialGrid) -> Result<EigenFamily> {
        for &lam in lambdas {
            self.check_lambda(lam)?;
        }
        let members: Vec<Result<(Vec<f64>, Vec<f64>)>> = lambdas
            .par_iter()
            .map(|&lam| self.family_member(lam, grid))
            .collect();
        let mut log_phi = Vec::with_capacity(lambdas.len() * grid.count);
        let mut dlog_phi = Vec::with_capacity(lambdas.len() * grid.count);
        for m in members {
            let (l, w) = m?;
            log_phi.extend(l);
            dlog_phi.extend(w);
        }
        Ok(EigenFamily {
            lambdas: lambdas.to_vec(),
            grid,
            log_phi,
            dlog_phi,
            profile: self.profile.clone(),
        })
    }

    // Values on the whole grid, whether 1/λ lies inside it or beyond it.
    fn family_member(&self, lambda: f64, grid: RadialGrid) -> Result<(Vec<f64>, Vec<f64>)> {
        let r_norm = 1.0 / lambda;
        if r_norm >= grid.r_max() {
            let (mut l, w, at_norm) =
                integrate_from_origin(&self.profile, lambda, grid, grid.count - 1, r_norm, self.opts)?;
            for v in &mut l {
                *v -= at_norm[0];
            }
            return Ok((l, w));
        }
        let sol = self.build_interior(lambda, grid)?;
        let first = sol.len();
        let (l, w) = integrate_segment(
            &self.profile,
            lambda,
            r_norm,
            [0.0, sol.dlog_phi_at_norm],
            grid,
            first..grid.count,
            grid.r_max(),
            self.opts,
        )?
        .0;
        let mut lp = sol.log_phi;
        let mut wp = sol.dlog_phi;
        lp.extend(l);
        wp.extend(w);
        Ok((lp, wp))
    }
}

// Integrate from the origin through nodes 0..=last and on to `r_end` (≥ r_last).
// Returns unnormalized (L, w) at the nodes and the state at `r_end`.
fn integrate_from_origin(
    profile: &MetricProfile,
    lambda: f64,
    grid: RadialGrid,
    last: usize,
    r_end: f64,
    opts: EigenOptions,
) -> Result<(Vec<f64>, Vec<f64>, [f64; 2])> {
    let n = profile.n as f64;
    let k0 = profile.k(0.0);
    let a = lambda * lambda * k0 * k0 / n;
    let r_start = ORIGIN_OFFSET / lambda;
    let taylor = |r: f64| -> [f64; 2] {
        let phi = 1.0 + 0.5 * a * r * r;
        [phi.ln(), a * r / phi]
    };
    let mut l = Vec::with_capacity(last + 1);
    let mut w = Vec::with_capacity(last + 1);
    let mut i = 0;
    while i <= last && grid.r(i) <= r_start {
        let s = taylor(grid.r(i));
        l.push(s[0]);
        w.push(s[1]);
        i += 1;
    }
    if r_end <= r_start {
        return Ok((l, w, taylor(r_end)));
    }
    let ((ls, ws), end) = integrate_segment(
        profile,
        lambda,
        r_start,
        taylor(r_start),
        grid,
        i..last + 1,
        r_end,
        opts,
    )?;
    l.extend(ls);
    w.extend(ws);
    Ok((l, w, end))
}

type Samples = (Vec<f64>, Vec<f64>);

// Integrate the Riccati system from (r0, state) to r_end, sampling the given nodes.
#[allow(clippy::too_many_arguments)]
fn integrate_segment(
    profile: &MetricProfile,
    lambda: f64,
    r0: f64,
    state: [f64; 2],
    grid: RadialGrid,
    nodes: std::ops::Range<usize>,
    r_end: f64,
    opts: EigenOptions,
) -> Result<(Samples, [f64; 2])> {
    let n1 = profile.n as f64 - 1.0;
    let l2 = lambda * lambda;
    let rhs = |r: f64, y: &[f64; 2]| -> [f64; 2] {
        let (k, dk, _) = profile.k3(r);
        let coef = n1 / r - dk / k;
        [y[1], l2 * k * k - coef * y[1] - y[1] * y[1]]
    };
    let mut l = Vec::with_capacity(nodes.len());
    let mut w = Vec::with_capacity(nodes.len());
    let mut node = nodes.start;
    let ode_opts = OdeOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        ..OdeOptions::default()
    };
    let mut stepper = Dopri5::new(rhs, r0, state, r_end, ode_opts)?;
    while node < nodes.end && grid.r(node) <= r0 {
        l.push(state[0]);
        w.push(state[1]);
        node += 1;
    }
    while !stepper.finished() {
        let r = stepper.step()?;
        let seg = *stepper.last_step().expect("step taken");
        while node < nodes.end && grid.r(node) <= r {
            let s = seg.eval(grid.r(node));
            l.push(s[0]);
            w.push(s[1]);
            node += 1;
        }
        if !stepper.y()[0].is_finite() {
            return Err(Error::Overflow(r));
        }
    }
    // Nodes past r_end by rounding only.
    while node < nodes.end {
        let s = *stepper.y();
        l.push(s[0]);
        w.push(s[1]);
        node += 1;
    }
    Ok(((l, w), *stepper.y()))
}

/// Eigenfunctions for a grid of `λ` on one radial grid, stored row-major by `λ`.
#[derive(Debug, Clone)]
pub struct EigenFamily {
    pub lambdas: Vec<f64>,
    pub grid: RadialGrid,
    log_phi: Vec<f64>,
    dlog_phi: Vec<f64>,
    profile: MetricProfile,
}

impl EigenFamily {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn profile(&self) -> &MetricProfile {
        &self.profile
    }

    pub fn log_phi_row(&self, j: usize) -> &[f64] {
        &self.log_phi[j * self.grid.count..(j + 1) * self.grid.count]
    }

    pub fn dlog_phi_row(&self, j: usize) -> &[f64] {
        &self.dlog_phi[j * self.grid.count..(j + 1) * self.grid.count]
    }

    /// `log Φ_{λ_j}(r)` by cubic Hermite interpolation.
    pub fn log_phi_at(&self, j: usize, r: f64) -> f64 {
        hermite_log(self.grid, self.log_phi_row(j), self.dlog_phi_row(j), r)
    }

    pub fn member(&self, j: usize) -> EntireSolution {
        let row_l = self.log_phi_row(j).to_vec();
        let row_w = self.dlog_phi_row(j).to_vec();
        let lambda = self.lambdas[j];
        let r_norm = 1.0 / lambda;
        // Recover Φ′/Φ at 1/λ from the interpolant when 1/λ lies on the grid.
        let dlog_norm = if r_norm < self.grid.r_max() {
            let x = r_norm / self.grid.dr;
            let i = x.floor() as usize;
            let t = x - i as f64;
            row_w[i] * (1.0 - t) + row_w[i + 1] * t
        } else {
            f64::NAN
        };
        EntireSolution {
            lambda,
            n: self.profile.n,
            grid: self.grid,
            log_phi: row_l,
            dlog_phi: row_w,
            dlog_phi_at_norm: dlog_norm,
            profile: self.profile.clone(),
        }
    }
}

/// Log-spaced grid of `count` values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub lambda: f64,
    /// `inf Φ/E` with `E = ⟨λr⟩^{−(n−1)/2} exp(λ∫₀ʳK)`.
    pub c_low: f64,
    /// `sup Φ/E`.
    pub c_high: f64,
    /// `inf Φ`, attained at the origin.
    pub inf_phi: f64,
}

/// `log E(r) = −((n−1)/2) log⟨λr⟩ + λ∫₀ʳK`.
pub fn log_envelope(profile: &MetricProfile, lambda: f64, r: f64, k_int: f64) -> f64 {
    let x = lambda * r;
    -0.25 * (profile.n as f64 - 1.0) * (1.0 + x * x).ln() + lambda * k_int
}

pub fn verify_envelopes(sol: &EntireSolution) -> Result<EnvelopeReport> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut inf_log_phi = f64::INFINITY;
    for i in 0..sol.len() {
        let r = sol.r(i);
        let ratio = sol.log_phi[i] - log_envelope(&sol.profile, sol.lambda, r, sol.profile.k_integral(r)?);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        inf_log_phi = inf_log_phi.min(sol.log_phi[i]);
    }
    Ok(EnvelopeReport {
        lambda: sol.lambda,
        c_low: lo.exp(),
        c_high: hi.exp(),
        inf_phi: inf_log_phi.exp(),
    })
}

/// `sup_{r ≤ 1/λ} max(Φ′/(λ²rΦ), |Φ″|/(λ²Φ))`, using the regular limit at `r = 0`.
pub fn verify_derivative_bounds(sol: &EntireSolution) -> f64 {
    let l2 = sol.lambda * sol.lambda;
    let k0 = sol.profile.k(0.0);
    let mut d0: f64 = k0 * k0 / sol.n as f64;
    for i in 1..=sol.interior_end() {
        let r = sol.r(i);
        let first = sol.dlog_phi[i] / (l2 * r);
        let second = sol.d2phi_over_phi(i).abs() / l2;
        d0 = d0.max(first).max(second);
    }
    d0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MuReport {
    pub lambda: f64,
    pub sup_abs_int_mu: f64,
    pub sup_abs_mu_over_lambda: f64,
    /// `8δ₀⁻² + 6δ₀⁻⁴`.
    pub int_mu_bound: f64,
    /// `3/δ₀`.
    pub mu_bound: f64,
    pub int_mu_ok: bool,
    pub mu_ok: bool,
}

/// Measure `μ = y′/y − λK` and `∫_{1/λ}^r μ` on the exterior nodes.
pub fn mu_diagnostic(sol: &EntireSolution) -> Result<MuReport> {
    let lambda = sol.lambda;
    let r_norm = 1.0 / lambda;
    let profile = &sol.profile;
    let n1 = sol.n as f64 - 1.0;
    if !sol.dlog_phi_at_norm.is_finite() {
        return Err(Error::InsufficientDomain(
            "solution does not cover r = 1/lambda".into(),
        ));
    }
    let mu_at = |r: f64, w: f64| -> f64 {
        let (k, dk, _) = profile.k3(r);
        n1 / (2.0 * r) - dk / (2.0 * k) + w - lambda * k
    };
    let log_y_norm = sol.log_y(r_norm, 0.0);
    let k_int_norm = profile.k_integral(r_norm)?;
    let mut sup_int: f64 = 0.0;
    let mut sup_mu = mu_at(r_norm, sol.dlog_phi_at_norm).abs();
    for i in (sol.interior_end() + 1)..sol.len() {
        let r = sol.r(i);
        let log_y = sol.log_y(r, sol.log_phi[i]);
        if !log_y.is_finite() {
            return Err(Error::Positivity(format!("y is not positive at r = {r}")));
        }
        let int_mu = log_y - log_y_norm - lambda * (profile.k_integral(r)? - k_int_norm);
        sup_int = sup_int.max(int_mu.abs());
        sup_mu = sup_mu.max(mu_at(r, sol.dlog_phi[i]).abs());
    }
    let d = profile.delta0;
    let int_mu_bound = 8.0 / (d * d) + 6.0 / d.powi(4);
    let mu_bound = 3.0 / d;
    let sup_mu_scaled = sup_mu / lambda;
    Ok(MuReport {
        lambda,
        sup_abs_int_mu: sup_int,
        sup_abs_mu_over_lambda: sup_mu_scaled,
        int_mu_bound,
        mu_bound,
        int_mu_ok: sup_int <= int_mu_bound,
        mu_ok: sup_mu_scaled <= mu_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    /// `max |Φ″ + ((n−1)/r − K′/K)Φ′ − λ²K²Φ| / (λ²Φ)` over interior nodes,
    /// with `Φ″` from a five-point difference of the stored `Φ′`.
    pub max_relative: f64,
    pub r_at_max: f64,
}

pub fn residual(sol: &EntireSolution) -> ResidualReport {
    let dr = sol.grid.dr;
    let l2 = sol.lambda * sol.lambda;
    let n1 = sol.n as f64 - 1.0;
    let mut worst = 0.0;
    let mut at = 0.0;
    for i in 2..sol.len().saturating_sub(2) {
        let li = sol.log_phi[i];
        // Φ′_j / Φ_i for the stencil.
        let g = |j: usize| sol.dlog_phi[j] * (sol.log_phi[j] - li).exp();
        let d2 = (g(i - 2) - 8.0 * g(i - 1) + 8.0 * g(i + 1) - g(i + 2)) / (12.0 * dr);
        let r = sol.r(i);
        let (k, dk, _) = sol.profile.k3(r);
        let res = d2 + (n1 / r - dk / k) * sol.dlog_phi[i] - l2 * k * k;
        let rel = (res / l2).abs();
        if rel > worst {
            worst = rel;
            at = r;
        }
    }
    ResidualReport {
        max_relative: worst,
        r_at_max: at,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat3_oracle(lambda: f64, r: f64) -> f64 {
        let x = lambda * r;
        let s = if x == 0.0 { 1.0 } else { x.sinh() / x };
        s / 1f64.sinh()
    }

    // Modified Bessel I₀ by its power series.
    fn bessel_i0(x: f64) -> f64 {
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..200 {
            term *= q / (k as f64 * k as f64);
            sum += term;
            if term < 1e-18 * sum {
                break;
            }
        }
        sum
    }

    fn solver(profile: MetricProfile) -> EigenSolver {
        EigenSolver::new(profile, EigenOptions::default()).unwrap()
    }

    #[test]
    fn flat_three_dimensional_closed_form() {
        let s = solver(MetricProfile::flat(3).unwrap());
        let lambda = 0.1;
        let sol = s.build(lambda, RadialGrid::new(0.01, 100.0).unwrap()).unwrap();
        assert_relative_eq!(sol.phi(0), 1.0 / 1f64.sinh(), max_relative = 1e-9);
        assert_relative_eq!(sol.phi(0), 0.850_918_128_239_321_5, max_relative = 1e-9);
        assert_relative_eq!(sol.phi(5000), 12.628_171_410_840_047, max_relative = 1e-8);
        for i in (0..sol.len()).step_by(97) {
            assert_relative_eq!(sol.phi(i), flat3_oracle(lambda, sol.r(i)), max_relative = 1e-8);
        }
        assert!((sol.phi(1000) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn origin_value_is_lambda_invariant() {
        let s = solver(MetricProfile::flat(3).unwrap());
        let a = s.build_interior(0.1, RadialGrid::new(0.01, 10.0).unwrap()).unwrap();
        let b = s.build_interior(0.01, RadialGrid::new(0.1, 100.0).unwrap()).unwrap();
        assert_relative_eq!(a.phi(0), b.phi(0), max_relative = 1e-12);
        let max = (0..b.len()).map(|i| b.phi(i)).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-10);
    }

    #[test]
    fn flat_two_dimensional_bessel() {
        let s = solver(MetricProfile::flat(2).unwrap());
        let lambda = 0.1;
        let sol = s.build(lambda, RadialGrid::new(0.01, 100.0).unwrap()).unwrap();
        let i50 = 5000;
        let oracle = bessel_i0(lambda * 50.0) / bessel_i0(1.0);
        assert_relative_eq!(sol.phi(i50), oracle, max_relative = 1e-6);
        assert_relative_eq!(sol.phi(i50), 21.515_366_855_926_022, max_relative = 1e-6);
    }

    #[test]
    fn lambda_above_range_rejected() {
        let s = solver(MetricProfile::flat(3).unwrap());
        assert!(matches!(
            s.build_interior(1.5, RadialGrid::new(0.01, 10.0).unwrap()),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn exterior_requires_ten_over_lambda() {
        let s = solver(MetricProfile::flat(3).unwrap());
        let i = s.build_interior(0.5, RadialGrid::new(0.01, 5.0).unwrap()).unwrap();
        assert!(matches!(s.extend_exterior(i), Err(Error::InsufficientDomain(_))));
    }

    #[test]
    fn power_law_residual_and_monotonicity() {
        let s = solver(MetricProfile::power_law(3, 0.5, 1.0).unwrap());
        let lambda = 0.05;
        let sol = s.build(lambda, RadialGrid::new(0.02, 220.0).unwrap()).unwrap();
        let res = residual(&sol);
        assert!(res.max_relative < 1e-6, "{res:?}");
        for i in 0..sol.len() {
            assert!(sol.log_phi[i].is_finite());
            assert!(sol.dlog_phi[i] >= 0.0);
        }
    }

    #[test]
    fn residual_converges_under_refinement() {
        let s = solver(MetricProfile::power_law(2, 0.4, 1.0).unwrap());
        let coarse = residual(&s.build(0.5, RadialGrid::new(0.04, 24.0).unwrap()).unwrap());
        let fine = residual(&s.build(0.5, RadialGrid::new(0.02, 24.0).unwrap()).unwrap());
        let order = (coarse.max_relative / fine.max_relative).log2();
        assert!(order >= 2.0, "order {order}: {coarse:?} {fine:?}");
    }

    #[test]
    fn flat_envelope_constants() {
        let s = solver(MetricProfile::flat(3).unwrap());
        let sol = s.build(0.1, RadialGrid::new(0.01, 500.0).unwrap()).unwrap();
        let env = verify_envelopes(&sol).unwrap();
        let scale = 1.0 / 1f64.sinh();
        assert!(env.c_low > 0.4 * scale && env.c_high <= scale * (1.0 + 1e-9), "{env:?}");
        assert_relative_eq!(env.inf_phi, scale, max_relative = 1e-9);
        // Φ/E at r = 0 is Φ(0).
        assert_relative_eq!(env.c_high, sol.phi(0), max_relative = 1e-9);
    }

    #[test]
    fn flat_derivative_constant() {
        let s = solver(MetricProfile::flat(3).unwrap());
        let sol = s.build_interior(0.1, RadialGrid::new(0.01, 10.0).unwrap()).unwrap();
        let d0 = verify_derivative_bounds(&sol);
        // Φ″/(λ²Φ) = 1 − 2(coth x − 1/x)/x peaks at x = 1.
        let x: f64 = 1.0;
        let oracle = 1.0 - 2.0 * (1.0 / x.tanh() - 1.0 / x) / x;
        assert_relative_eq!(d0, oracle, max_relative = 1e-6);
        assert!(d0 <= 1.0);
    }

    #[test]
    fn flat_mu_is_log_of_damped_sinh() {
        let s = solver(MetricProfile::flat(3).unwrap());
        let lambda = 0.2;
        let sol = s.build(lambda, RadialGrid::new(0.01, 100.0).unwrap()).unwrap();
        let rep = mu_diagnostic(&sol).unwrap();
        // ∫_{1/λ}^r μ = log(sinh(λr) e^{−λr}) − log(sinh(1) e^{−1}), which tends to log(1/2) − log(sinh(1)/e).
        let limit = (0.5f64).ln() - (1f64.sinh() / 1f64.exp()).ln();
        assert_relative_eq!(rep.sup_abs_int_mu, limit.abs(), max_relative = 1e-6);
        assert!(rep.sup_abs_int_mu < 1.0);
        // μ = λ(coth(λr) − 1) is largest at r = 1/λ.
        assert_relative_eq!(rep.sup_abs_mu_over_lambda, 1.0 / 1f64.tanh() - 1.0, max_relative = 1e-8);
        assert!(rep.int_mu_ok && rep.mu_ok);
    }

    #[test]
    fn flat_two_dimensional_mu_within_bound() {
        let s = solver(MetricProfile::flat(2).unwrap());
        let sol = s.build(0.2, RadialGrid::new(0.01, 100.0).unwrap()).unwrap();
        let rep = mu_diagnostic(&sol).unwrap();
        assert!(rep.sup_abs_int_mu.is_finite() && rep.int_mu_ok && rep.mu_ok, "{rep:?}");
    }

    #[test]
    fn family_matches_single_builds() {
        let s = solver(MetricProfile::flat(3).unwrap());
        let grid = RadialGrid::new(0.05, 60.0).unwrap();
        let lambdas = log_spaced(0.01, 1.0, 9);
        let fam = s.build_family(&lambdas, grid).unwrap();
        for (j, &lam) in lambdas.iter().enumerate() {
            for i in (0..grid.count).step_by(50) {
                let r = grid.r(i);
                let got = fam.log_phi_row(j)[i].exp();
                assert_relative_eq!(got, flat3_oracle(lam, r), max_relative = 1e-6);
            }
        }
        let single = s.build(1.0, grid).unwrap();
        let one = s.build_family(&[1.0], grid).unwrap();
        for i in 0..grid.count {
            assert_eq!(one.log_phi_row(0)[i], single.log_phi[i]);
        }
    }

    #[test]
    fn family_interpolation_between_nodes() {
        let s = solver(MetricProfile::flat(3).unwrap());
        let grid = RadialGrid::new(0.1, 40.0).unwrap();
        let fam = s.build_family(&[0.3], grid).unwrap();
        for r in [0.05, 3.33, 17.77, 39.95] {
            let got = fam.log_phi_at(0, r).exp();
            assert_relative_eq!(got, flat3_oracle(0.3, r), max_relative = 1e-6);
        }
    }
}
