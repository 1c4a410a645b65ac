//! Integrable damping coefficients `b(t)` and the time change that removes
//! the damping term.
//!
//! With `m(t) = exp(∫₀ᵗ b)`, `s = h(t) = ∫₀ᵗ 1/m` and `t = η(s)`, the weight
//! `m̃(s) = m(η(s))` satisfies `m̃′ = b(η) m̃²` and `η′ = m̃`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::gauss_kronrod_15;

/// Spacing of the cached `(t, ∫b, h)` breakpoints.
const TABLE_STEP: f64 = 0.125;
/// Default extent of the breakpoint cache.
pub const DEFAULT_HORIZON: f64 = 256.0;
const ETA_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum DampingKind {
    Zero,
    /// `b = μ(1+t)^{-β}`.
    Power { mu: f64, beta: f64 },
    /// `b = μ cos(t) (1+t)^{-β}`.
    Oscillatory { mu: f64, beta: f64 },
    /// Piecewise linear through the samples, zero past the last one.
    Tabulated {
        points: Vec<(f64, f64)>,
        tail_bound: f64,
    },
}

#[derive(Debug, Clone)]
pub struct DampingProfile {
    pub kind: DampingKind,
    /// Certified upper bound on `∫₀^∞ |b|`.
    pub l1_bound: f64,
    /// `exp(−l1_bound)`; `m` and `m̃` stay in `[δ₁, 1/δ₁]`.
    pub delta1: f64,
    // Breakpoints t_i = i·TABLE_STEP with ∫₀^{t_i} b and h(t_i).
    nodes_b: Vec<f64>,
    nodes_h: Vec<f64>,
}

impl DampingProfile {
    pub fn zero() -> Self {
        Self::build(DampingKind::Zero, 0.0, 0.0)
    }

    pub fn power(mu: f64, beta: f64) -> Result<Self> {
        Self::power_with_horizon(mu, beta, DEFAULT_HORIZON)
    }

    pub fn power_with_horizon(mu: f64, beta: f64, horizon: f64) -> Result<Self> {
        check_power(mu, beta)?;
        Ok(Self::build(
            DampingKind::Power { mu, beta },
            mu.abs() / (beta - 1.0),
            horizon,
        ))
    }

    pub fn oscillatory(mu: f64, beta: f64) -> Result<Self> {
        Self::oscillatory_with_horizon(mu, beta, DEFAULT_HORIZON)
    }

    pub fn oscillatory_with_horizon(mu: f64, beta: f64, horizon: f64) -> Result<Self> {
        check_power(mu, beta)?;
        // |cos t| ≤ 1 gives the same bound as the power kind.
        Ok(Self::build(
            DampingKind::Oscillatory { mu, beta },
            mu.abs() / (beta - 1.0),
            horizon,
        ))
    }

    /// Piecewise-linear `b` through `points` (starting at `t = 0`), plus a
    /// declared bound on the `L¹` mass not represented by the table.
    pub fn tabulated(points: Vec<(f64, f64)>, tail_bound: f64) -> Result<Self> {
        if points.len() < 2 || points[0].0 != 0.0 {
            return Err(Error::InsufficientData(
                "a damping table needs at least 2 samples starting at t = 0".into(),
            ));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0)
            || points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite())
        {
            return Err(Error::OutOfRange(
                "damping table times must be finite and strictly increasing".into(),
            ));
        }
        if !(tail_bound >= 0.0 && tail_bound.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "tail bound {tail_bound} must be finite and nonnegative"
            )));
        }
        let l1: f64 = points
            .windows(2)
            .map(|w| abs_linear_integral(w[0], w[1]))
            .sum();
        let horizon = points.last().unwrap().0 + 1.0;
        Ok(Self::build(
            DampingKind::Tabulated { points, tail_bound },
            l1 + tail_bound,
            horizon,
        ))
    }

    fn build(kind: DampingKind, l1_bound: f64, horizon: f64) -> Self {
        let mut p = Self {
            kind,
            l1_bound,
            delta1: (-l1_bound).exp(),
            nodes_b: vec![0.0],
            nodes_h: vec![0.0],
        };
        if matches!(p.kind, DampingKind::Zero) {
            return p;
        }
        let count = (horizon / TABLE_STEP).ceil() as usize;
        for i in 0..count {
            let (a, c) = (i as f64 * TABLE_STEP, (i + 1) as f64 * TABLE_STEP);
            let b_next = p.nodes_b[i] + p.b_increment(a, c);
            let h_next = p.nodes_h[i] + p.h_increment(a, p.nodes_b[i], c);
            p.nodes_b.push(b_next);
            p.nodes_h.push(h_next);
        }
        p
    }

    fn horizon(&self) -> f64 {
        (self.nodes_b.len() - 1) as f64 * TABLE_STEP
    }

    /// The coefficient `b(t)`.
    pub fn b(&self, t: f64) -> f64 {
        match &self.kind {
            DampingKind::Zero => 0.0,
            DampingKind::Power { mu, beta } => mu * (1.0 + t).powf(-beta),
            DampingKind::Oscillatory { mu, beta } => mu * t.cos() * (1.0 + t).powf(-beta),
            DampingKind::Tabulated { points, .. } => {
                let last = points.len() - 1;
                if t >= points[last].0 {
                    return 0.0;
                }
                let i = points.partition_point(|p| p.0 <= t).saturating_sub(1).min(last - 1);
                let (p0, p1) = (points[i], points[i + 1]);
                p0.1 + (p1.1 - p0.1) * (t - p0.0) / (p1.0 - p0.0)
            }
        }
    }

    // ∫ₐᶜ b over a short interval.
    fn b_increment(&self, a: f64, c: f64) -> f64 {
        match &self.kind {
            DampingKind::Zero => 0.0,
            DampingKind::Power { mu, beta } => {
                let g = |t: f64| (1.0 + t).powf(1.0 - beta);
                mu * (g(a) - g(c)) / (beta - 1.0)
            }
            DampingKind::Oscillatory { .. } => {
                let mut f = |t: f64| self.b(t);
                gauss_kronrod_15(&mut f, a, c).0
            }
            DampingKind::Tabulated { points, .. } => {
                // Integrate exactly across the linear pieces overlapping [a, c].
                let mut acc = 0.0;
                let mut lo = a;
                while lo < c {
                    let next_knot = points
                        .iter()
                        .map(|p| p.0)
                        .find(|&x| x > lo)
                        .unwrap_or(f64::INFINITY);
                    let hi = next_knot.min(c);
                    acc += 0.5 * (hi - lo) * (self.b(lo) + self.b_left(hi));
                    lo = hi;
                }
                acc
            }
        }
    }

    // Left limit of b, which differs from b only at the end of a table.
    fn b_left(&self, t: f64) -> f64 {
        match &self.kind {
            DampingKind::Tabulated { points, .. } => {
                let last = points[points.len() - 1];
                if t == last.0 {
                    last.1
                } else {
                    self.b(t)
                }
            }
            _ => self.b(t),
        }
    }

    // ∫ₐᶜ exp(−∫₀^τ b) dτ given ∫₀ᵃ b.
    fn h_increment(&self, a: f64, big_b_a: f64, c: f64) -> f64 {
        let mut f = |tau: f64| (-(big_b_a + self.b_increment(a, tau))).exp();
        gauss_kronrod_15(&mut f, a, c).0
    }

    fn node_at_or_below(&self, t: f64) -> usize {
        ((t / TABLE_STEP).floor() as usize).min(self.nodes_b.len() - 1)
    }

    fn b_integral_unchecked(&self, t: f64) -> f64 {
        if matches!(self.kind, DampingKind::Zero) {
            return 0.0;
        }
        if let DampingKind::Power { .. } = self.kind {
            return self.b_increment(0.0, t);
        }
        let mut i = self.node_at_or_below(t);
        let mut acc = self.nodes_b[i];
        let mut a = i as f64 * TABLE_STEP;
        while t - a > TABLE_STEP {
            acc += self.b_increment(a, a + TABLE_STEP);
            i += 1;
            a = i as f64 * TABLE_STEP;
        }
        acc + self.b_increment(a, t)
    }

    /// `∫₀ᵗ b(τ) dτ`.
    pub fn b_integral(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.b_integral_unchecked(t))
    }

    /// `m(t) = exp(∫₀ᵗ b)`.
    pub fn m_of_t(&self, t: f64) -> Result<f64> {
        Ok(self.b_integral(t)?.exp())
    }

    fn h_unchecked(&self, t: f64) -> f64 {
        if matches!(self.kind, DampingKind::Zero) {
            return t;
        }
        let mut i = self.node_at_or_below(t);
        let mut acc = self.nodes_h[i];
        let mut big_b = self.nodes_b[i];
        let mut a = i as f64 * TABLE_STEP;
        while t - a > TABLE_STEP {
            let c = a + TABLE_STEP;
            acc += self.h_increment(a, big_b, c);
            big_b += self.b_increment(a, c);
            i += 1;
            a = i as f64 * TABLE_STEP;
        }
        acc + self.h_increment(a, big_b, t)
    }

    /// `h(t) = ∫₀ᵗ 1/m`.
    pub fn h_of_t(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.h_unchecked(t))
    }

    /// `η = h⁻¹`.
    pub fn eta_of_s(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::domain("s", s, "argument must be nonnegative"));
        }
        if matches!(self.kind, DampingKind::Zero) || s == 0.0 {
            return Ok(s);
        }
        let (mut lo, mut hi, mut h_lo);
        let last = self.nodes_h.len() - 1;
        if s <= self.nodes_h[last] {
            let j = self.nodes_h.partition_point(|&v| v <= s).clamp(1, last);
            lo = (j - 1) as f64 * TABLE_STEP;
            hi = j as f64 * TABLE_STEP;
            h_lo = self.nodes_h[j - 1];
        } else {
            let t_last = self.horizon();
            let gap = s - self.nodes_h[last];
            lo = t_last + self.delta1 * gap;
            hi = t_last + gap / self.delta1;
            h_lo = self.h_unchecked(lo);
        }
        // Safeguarded Newton on h(t) = s with h′ = exp(−∫b).
        let mut t = lo + (s - h_lo) * self.b_integral_unchecked(lo).exp();
        if !(t > lo && t < hi) {
            t = 0.5 * (lo + hi);
        }
        for _ in 0..100 {
            let f = self.h_unchecked(t) - s;
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
                h_lo = f + s;
            }
            let step = f * self.b_integral_unchecked(t).exp();
            let mut next = t - step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= ETA_TOL || hi - lo <= ETA_TOL {
                return Ok(next);
            }
            t = next;
        }
        let _ = h_lo;
        Ok(t)
    }

    /// `m̃(s) = m(η(s))`.
    pub fn m_tilde(&self, s: f64) -> Result<f64> {
        if matches!(self.kind, DampingKind::Zero) {
            check_time(s)?;
            return Ok(1.0);
        }
        let t = self.eta_of_s(s)?;
        Ok(self.b_integral_unchecked(t).exp())
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, DampingKind::Zero)
    }

    /// Short identifier for records and file names.
    pub fn label(&self) -> String {
        match &self.kind {
            DampingKind::Zero => "zero".into(),
            DampingKind::Power { mu, beta } => format!("power-mu{mu}-beta{beta}"),
            DampingKind::Oscillatory { mu, beta } => format!("oscillatory-mu{mu}-beta{beta}"),
            DampingKind::Tabulated { points, .. } => format!("tabulated-{}", points.len()),
        }
    }
}

fn check_power(mu: f64, beta: f64) -> Result<()> {
    if !mu.is_finite() {
        return Err(Error::OutOfRange(format!("mu = {mu} must be finite")));
    }
    if !(beta > 1.0 && beta.is_finite()) {
        return Err(Error::OutOfRange(format!(
            "beta = {beta} must exceed 1 for integrable damping"
        )));
    }
    Ok(())
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0) {
        return Err(Error::domain("t", t, "argument must be nonnegative"));
    }
    Ok(())
}

// ∫|linear| between two samples, splitting at a sign change.
fn abs_linear_integral(p: (f64, f64), q: (f64, f64)) -> f64 {
    let dt = q.0 - p.0;
    if p.1 * q.1 >= 0.0 {
        0.5 * dt * (p.1.abs() + q.1.abs())
    } else {
        let frac = p.1.abs() / (p.1.abs() + q.1.abs());
        0.5 * dt * (frac * p.1.abs() + (1.0 - frac) * q.1.abs())
    }
}

/// Serializable damping description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingConfig {
    pub kind: String,
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub table: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub tail_bound: Option<f64>,
}

impl DampingConfig {
    pub fn build(&self) -> Result<DampingProfile> {
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| Error::Configuration(format!("damping: missing key `{key}`")))
        };
        match self.kind.as_str() {
            "zero" | "none" => Ok(DampingProfile::zero()),
            "power" | "scattering-power" => {
                DampingProfile::power(need(self.mu, "mu")?, need(self.beta, "beta")?)
            }
            "oscillatory" | "signed-oscillatory" => {
                DampingProfile::oscillatory(need(self.mu, "mu")?, need(self.beta, "beta")?)
            }
            "table" | "tabulated" => {
                let table = self
                    .table
                    .as_ref()
                    .ok_or_else(|| Error::Configuration("damping: missing key `table`".into()))?;
                let pts = table.iter().map(|p| (p[0], p[1])).collect();
                DampingProfile::tabulated(pts, self.tail_bound.unwrap_or(0.0))
            }
            other => Err(Error::Configuration(format!("damping: unknown kind `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn zero_damping_is_identity() {
        let d = DampingProfile::zero();
        assert_eq!(d.delta1, 1.0);
        for t in [0.0, 0.7, 55.0] {
            assert_eq!(d.m_of_t(t).unwrap(), 1.0);
            assert_eq!(d.h_of_t(t).unwrap(), t);
            assert_eq!(d.eta_of_s(t).unwrap(), t);
            assert_eq!(d.m_tilde(t).unwrap(), 1.0);
        }
    }

    #[test]
    fn power_m_closed_form() {
        let d = DampingProfile::power(1.0, 2.0).unwrap();
        assert_relative_eq!(d.m_of_t(3.0).unwrap(), 0.75f64.exp(), max_relative = 1e-14);
        assert_eq!(d.m_of_t(0.0).unwrap(), 1.0);
    }

    #[test]
    fn oscillatory_m_matches_simpson() {
        let d = DampingProfile::oscillatory(0.3, 2.0).unwrap();
        let integral = simpson(|t| 0.3 * t.cos() / (1.0 + t).powi(2), 0.0, 10.0, 200_000);
        assert_relative_eq!(d.m_of_t(10.0).unwrap(), integral.exp(), max_relative = 1e-9);
    }

    #[test]
    fn power_h_matches_simpson() {
        // h′ = exp(−t/(1+t)) for μ = 1, β = 2.
        let d = DampingProfile::power(1.0, 2.0).unwrap();
        for t in [0.3, 4.0, 31.7, 400.0] {
            let oracle = simpson(|x| (-x / (1.0 + x)).exp(), 0.0, t, 400_000);
            assert_relative_eq!(d.h_of_t(t).unwrap(), oracle, max_relative = 1e-10);
        }
    }

    #[test]
    fn eta_matches_bisection_oracle() {
        let d = DampingProfile::power(1.0, 2.0).unwrap();
        let h = |t: f64| simpson(|x| (-x / (1.0 + x)).exp(), 0.0, t, 20_000);
        let (mut lo, mut hi) = (0.0, 50.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > 5.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((d.eta_of_s(5.0).unwrap() - 0.5 * (lo + hi)).abs() < 1e-9);
    }

    #[test]
    fn m_tilde_approaches_e() {
        let d = DampingProfile::power(1.0, 2.0).unwrap();
        let v = d.m_tilde(1e4).unwrap();
        // m(t) = e^{t/(1+t)}; at s = 1e4, t ≈ e·s so the gap is about 1/t.
        assert!((v - std::f64::consts::E).abs() < 1e-3, "{v}");
        assert!(v < std::f64::consts::E);
    }

    #[test]
    fn m_tilde_derivative_identity() {
        for d in [
            DampingProfile::power(1.0, 2.0).unwrap(),
            DampingProfile::oscillatory(0.3, 2.0).unwrap(),
        ] {
            let s = 2.0;
            let err = |h: f64| {
                let fd = (d.m_tilde(s + h).unwrap() - d.m_tilde(s - h).unwrap()) / (2.0 * h);
                let mt = d.m_tilde(s).unwrap();
                (fd - d.b(d.eta_of_s(s).unwrap()) * mt * mt).abs()
            };
            let (e1, e2) = (err(1e-2), err(5e-3));
            assert!(e1 < 1e-4);
            assert!((e1 / e2).log2() > 1.8, "{e1} {e2}");
        }
    }

    #[test]
    fn round_trip_random_times() {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let d = DampingProfile::oscillatory(-0.4, 1.5).unwrap();
        for i in 0..100u64 {
            let mut hasher = DefaultHasher::new();
            i.hash(&mut hasher);
            let t = (hasher.finish() % 1_000_000) as f64 * 1e-4;
            let back = d.eta_of_s(d.h_of_t(t).unwrap()).unwrap();
            assert!((back - t).abs() < 1e-8, "t={t} back={back}");
        }
    }

    #[test]
    fn beyond_horizon_consistent() {
        let d = DampingProfile::oscillatory_with_horizon(0.3, 2.0, 4.0).unwrap();
        let full = DampingProfile::oscillatory(0.3, 2.0).unwrap();
        for t in [3.9, 4.0, 7.3, 20.0] {
            assert_relative_eq!(d.h_of_t(t).unwrap(), full.h_of_t(t).unwrap(), max_relative = 1e-13);
            assert!((d.eta_of_s(d.h_of_t(t).unwrap()).unwrap() - t).abs() < 1e-9);
        }
    }

    #[test]
    fn tabulated_matches_exact_piecewise_integral() {
        let d = DampingProfile::tabulated(vec![(0.0, 1.0), (1.0, -1.0), (3.0, 0.0)], 0.1).unwrap();
        // |b| integral: 0.25 + 0.25 + 1.0, plus the tail bound.
        assert_relative_eq!(d.l1_bound, 1.6, max_relative = 1e-15);
        assert_relative_eq!(d.b_integral(1.0).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(d.b_integral(5.0).unwrap(), -1.0, max_relative = 1e-14);
        assert_eq!(d.b(4.0), 0.0);
    }

    #[test]
    fn invalid_parameters() {
        assert!(DampingProfile::power(1.0, 1.0).is_err());
        assert!(DampingProfile::oscillatory(f64::NAN, 2.0).is_err());
        let d = DampingProfile::power(1.0, 2.0).unwrap();
        assert!(matches!(d.h_of_t(-1.0), Err(Error::Domain { .. })));
        assert!(matches!(d.eta_of_s(-1.0), Err(Error::Domain { .. })));
    }

    proptest! {
        #[test]
        fn inverse_pair_and_sandwich(mu in -1.0f64..1.0, beta in 1.2f64..3.0, t in 0.0f64..100.0, osc in proptest::bool::ANY) {
            let d = if osc {
                DampingProfile::oscillatory(mu, beta).unwrap()
            } else {
                DampingProfile::power(mu, beta).unwrap()
            };
            let s = d.h_of_t(t).unwrap();
            prop_assert!((d.eta_of_s(s).unwrap() - t).abs() < 1e-8);
            prop_assert!((d.h_of_t(d.eta_of_s(t).unwrap()).unwrap() - t).abs() < 1e-8);
            prop_assert!(s >= d.delta1 * t * (1.0 - 1e-14) && s <= t / d.delta1 * (1.0 + 1e-14));
            let m = d.m_of_t(t).unwrap();
            prop_assert!(m >= d.delta1 && m <= 1.0 / d.delta1);
            let mt = d.m_tilde(t).unwrap();
            prop_assert!(mt >= d.delta1 && mt <= 1.0 / d.delta1);
        }

        #[test]
        fn nonnegative_damping_gives_monotone_m(mu in 0.0f64..2.0, beta in 1.1f64..3.0, t in 0.0f64..50.0, dt in 0.0f64..5.0) {
            let d = DampingProfile::power(mu, beta).unwrap();
            prop_assert!(d.m_of_t(t + dt).unwrap() >= d.m_of_t(t).unwrap());
        }
    }
}
