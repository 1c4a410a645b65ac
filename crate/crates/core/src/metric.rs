//! Spherically symmetric metrics `K(r)^2 dr^2 + r^2 dω^2` and the quantities
//! derived from them: the radial travel distance `∫₀ʳ K`, the effective
//! potential `G(r)`, and a long-range validation report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, QuadOptions};

/// Safety factor applied to the exact ellipticity bound so the invariant is strict.
const ELLIPTICITY_MARGIN: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricKind {
    Flat,
    /// `K = 1 + c⟨r⟩^{-ρ}`.
    PowerLaw { c: f64, rho: f64 },
    Tabulated(Spline),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricProfile {
    pub name: String,
    pub n: usize,
    pub kind: MetricKind,
    pub delta0: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KValues {
    pub k: f64,
    pub dk: f64,
    pub d2k: f64,
}

fn check_dimension(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::OutOfRange(format!("dimension n = {n} must be at least 2")));
    }
    Ok(())
}

impl MetricProfile {
    pub fn flat(n: usize) -> Result<Self> {
        check_dimension(n)?;
        Ok(Self {
            name: format!("flat-n{n}"),
            n,
            kind: MetricKind::Flat,
            delta0: ELLIPTICITY_MARGIN,
            // Any decay rate is admissible for K ≡ 1; a unit rate keeps grid rules finite.
            rho: 1.0,
        })
    }

    pub fn power_law(n: usize, c: f64, rho: f64) -> Result<Self> {
        check_dimension(n)?;
        if !(c >= -0.5 && c <= 0.5) {
            return Err(Error::OutOfRange(format!("c = {c} must lie in [-1/2, 1/2]")));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::OutOfRange(format!("rho = {rho} must be positive")));
        }
        // K ranges over (1, 1+c] for c ≥ 0 and [1-|c|, 1) for c < 0.
        let delta0 = if c >= 0.0 {
            ELLIPTICITY_MARGIN / (1.0 + c)
        } else {
            ELLIPTICITY_MARGIN * (1.0 + c)
        };
        Ok(Self {
            name: format!("power-n{n}-c{c}-rho{rho}"),
            n,
            kind: MetricKind::PowerLaw { c, rho },
            delta0,
            rho,
        })
    }

    /// Metric from samples `(r_i, K_i)` starting at `r = 0`, with a declared decay rate.
    ///
    /// The declared rate is not checked here so that [`validate_long_range`]
    /// can flag non-decaying tables.
    pub fn tabulated(n: usize, table: &[(f64, f64)], rho: f64) -> Result<Self> {
        check_dimension(n)?;
        let spline = Spline::clamped_at_origin(table)?;
        let (lo, hi) = spline.range();
        if lo <= 0.0 {
            return Err(Error::OutOfRange(format!(
                "tabulated K must be positive (min {lo})"
            )));
        }
        let delta0 = ELLIPTICITY_MARGIN * lo.min(1.0 / hi);
        Ok(Self {
            name: format!("table-n{n}"),
            n,
            kind: MetricKind::Tabulated(spline),
            delta0,
            rho,
        })
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.kind, MetricKind::Flat)
    }

    /// `(K, K′, K″)` at `r ≥ 0`.
    pub fn eval_k(&self, r: f64) -> Result<KValues> {
        if !(r >= 0.0) {
            return Err(Error::domain("r", r, "radius must be nonnegative"));
        }
        let (k, dk, d2k) = self.k3(r);
        Ok(KValues { k, dk, d2k })
    }

    /// Unchecked `(K, K′, K″)`; `r` must be nonnegative.
    #[inline]
    pub fn k3(&self, r: f64) -> (f64, f64, f64) {
        match &self.kind {
            MetricKind::Flat => (1.0, 0.0, 0.0),
            MetricKind::PowerLaw { c, rho } => {
                let w = 1.0 + r * r;
                let base = w.powf(-0.5 * rho - 1.0);
                let k = 1.0 + c * base * w;
                let dk = -c * rho * r * base;
                let d2k = c * rho * base * ((rho + 2.0) * r * r / w - 1.0);
                (k, dk, d2k)
            }
            MetricKind::Tabulated(s) => s.eval3(r),
        }
    }

    #[inline]
    pub fn k(&self, r: f64) -> f64 {
        match &self.kind {
            MetricKind::Flat => 1.0,
            MetricKind::PowerLaw { c, rho } => 1.0 + c * (1.0 + r * r).powf(-0.5 * rho),
            MetricKind::Tabulated(s) => s.eval3(r).0,
        }
    }

    /// `∫₀ʳ K(τ) dτ`.
    pub fn k_integral(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::domain("r", r, "radius must be nonnegative"));
        }
        Ok(match &self.kind {
            MetricKind::Flat => r,
            MetricKind::PowerLaw { c, rho } if *rho == 1.0 => r + c * r.asinh(),
            MetricKind::PowerLaw { c, rho } if *rho == 2.0 => r + c * r.atan(),
            MetricKind::PowerLaw { c, rho } => {
                let (c, rho) = (*c, *rho);
                r + c * integrate_tail(|t| (1.0 + t * t).powf(-0.5 * rho), r)?
            }
            MetricKind::Tabulated(s) => s.integral(r),
        })
    }

    /// The radius `r` with `∫₀ʳ K = s`.
    pub fn k_integral_inverse(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(Error::domain("s", s, "travel distance must be nonnegative"));
        }
        if self.is_flat() {
            return Ok(s);
        }
        let mut lo = self.delta0 * s;
        let mut hi = s / self.delta0;
        let mut r = s;
        for _ in 0..200 {
            let f = self.k_integral(r)? - s;
            if f > 0.0 {
                hi = r;
            } else {
                lo = r;
            }
            let newton = r - f / self.k(r);
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - r).abs() <= 1e-14 * r.max(1.0) {
                return Ok(next);
            }
            r = next;
        }
        Ok(r)
    }

    /// Effective potential
    /// `G = −(n−1)(n−3)/(4r²) + (n−1)K′/(2rK) + K″/(2K) − (3/4)(K′/K)²`.
    pub fn g_potential(&self, r: f64) -> Result<f64> {
        if r == 0.0 {
            return Err(Error::Singularity("G(r) is singular at r = 0"));
        }
        if !(r > 0.0) {
            return Err(Error::domain("r", r, "radius must be positive"));
        }
        let n = self.n as f64;
        let (k, dk, d2k) = self.k3(r);
        let q = dk / k;
        Ok(-(n - 1.0) * (n - 3.0) / (4.0 * r * r) + (n - 1.0) * q / (2.0 * r) + d2k / (2.0 * k)
            - 0.75 * q * q)
    }

    /// Cumulative `∫₀ʳ K` on a uniform grid for repeated lookups.
    pub fn k_integral_table(&self, dr: f64, r_max: f64) -> Result<KIntegralTable> {
        KIntegralTable::new(self, dr, r_max)
    }
}

fn integrate_tail(f: impl Fn(f64) -> f64, r: f64) -> Result<f64> {
    Ok(quadrature::integrate(
        f,
        0.0,
        r,
        QuadOptions {
            abs_tol: 1e-15,
            rel_tol: 1e-13,
            max_intervals: 4000,
        },
    )?
    .value)
}

/// Clamped cubic spline with `K′(0) = 0`, held constant past the last node.
#[derive(Debug, Clone, PartialEq)]
pub struct Spline {
    x: Vec<f64>,
    y: Vec<f64>,
    // Second derivatives at the nodes.
    m: Vec<f64>,
    // Cumulative integral at the nodes.
    cum: Vec<f64>,
}

impl Spline {
    fn clamped_at_origin(table: &[(f64, f64)]) -> Result<Self> {
        if table.len() < 3 {
            return Err(Error::InsufficientData(
                "a tabulated metric needs at least 3 samples".into(),
            ));
        }
        if table[0].0 != 0.0 {
            return Err(Error::OutOfRange("tabulated metric must start at r = 0".into()));
        }
        if table.iter().any(|&(r, k)| !r.is_finite() || !k.is_finite()) {
            return Err(Error::OutOfRange("tabulated metric has non-finite entries".into()));
        }
        if table.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::OutOfRange("table radii must be strictly increasing".into()));
        }
        let x: Vec<f64> = table.iter().map(|p| p.0).collect();
        let y: Vec<f64> = table.iter().map(|p| p.1).collect();
        let n = x.len();
        let slope0 = 0.0;
        let slope_n = (y[n - 1] - y[n - 2]) / (x[n - 1] - x[n - 2]);

        // Tridiagonal system for the node second derivatives.
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let h0 = x[1] - x[0];
        b[0] = h0 / 3.0;
        c[0] = h0 / 6.0;
        d[0] = (y[1] - y[0]) / h0 - slope0;
        for i in 1..n - 1 {
            let hl = x[i] - x[i - 1];
            let hr = x[i + 1] - x[i];
            a[i] = hl / 6.0;
            b[i] = (hl + hr) / 3.0;
            c[i] = hr / 6.0;
            d[i] = (y[i + 1] - y[i]) / hr - (y[i] - y[i - 1]) / hl;
        }
        let hn = x[n - 1] - x[n - 2];
        a[n - 1] = hn / 6.0;
        b[n - 1] = hn / 3.0;
        d[n - 1] = slope_n - (y[n - 1] - y[n - 2]) / hn;
        for i in 1..n {
            let w = a[i] / b[i - 1];
            b[i] -= w * c[i - 1];
            d[i] -= w * d[i - 1];
        }
        let mut m = vec![0.0; n];
        m[n - 1] = d[n - 1] / b[n - 1];
        for i in (0..n - 1).rev() {
            m[i] = (d[i] - c[i] * m[i + 1]) / b[i];
        }

        let mut cum = vec![0.0; n];
        for i in 0..n - 1 {
            let h = x[i + 1] - x[i];
            cum[i + 1] =
                cum[i] + 0.5 * h * (y[i] + y[i + 1]) - h * h * h / 24.0 * (m[i] + m[i + 1]);
        }
        Ok(Self { x, y, m, cum })
    }

    fn locate(&self, r: f64) -> usize {
        match self.x.partition_point(|&v| v <= r) {
            0 => 0,
            i => (i - 1).min(self.x.len() - 2),
        }
    }

    fn eval3(&self, r: f64) -> (f64, f64, f64) {
        let last = self.x.len() - 1;
        if r >= self.x[last] {
            return (self.y[last], 0.0, 0.0);
        }
        let i = self.locate(r);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - r) / h;
        let b = 1.0 - a;
        let (mi, mj) = (self.m[i], self.m[i + 1]);
        let v = a * self.y[i] + b * self.y[i + 1] + ((a * a * a - a) * mi + (b * b * b - b) * mj) * h * h / 6.0;
        let d = (self.y[i + 1] - self.y[i]) / h - (3.0 * a * a - 1.0) * h / 6.0 * mi
            + (3.0 * b * b - 1.0) * h / 6.0 * mj;
        let dd = a * mi + b * mj;
        (v, d, dd)
    }

    fn integral(&self, r: f64) -> f64 {
        let last = self.x.len() - 1;
        if r >= self.x[last] {
            return self.cum[last] + (r - self.x[last]) * self.y[last];
        }
        let i = self.locate(r);
        let h = self.x[i + 1] - self.x[i];
        let t = r - self.x[i];
        // Integrate the cubic on [x_i, r] in terms of s = t/h.
        let s = t / h;
        let (yi, yj, mi, mj) = (self.y[i], self.y[i + 1], self.m[i], self.m[i + 1]);
        // a = 1 - s, b = s; ∫ a = s - s²/2, ∫ b = s²/2,
        // ∫ (a³ - a) = (1 - (1-s)^4)/4 - (s - s²/2), ∫ (b³ - b) = s⁴/4 - s²/2.
        let ia = s - 0.5 * s * s;
        let ib = 0.5 * s * s;
        let ia3 = 0.25 * (1.0 - (1.0 - s).powi(4)) - ia;
        let ib3 = 0.25 * s.powi(4) - ib;
        self.cum[i] + h * (yi * ia + yj * ib + h * h / 6.0 * (mi * ia3 + mj * ib3))
    }

    fn range(&self) -> (f64, f64) {
        // Sample densely between nodes; spline overshoot is part of the profile.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.x.len() - 1 {
            for j in 0..=16 {
                let r = self.x[i] + (self.x[i + 1] - self.x[i]) * j as f64 / 16.0;
                let v = self.eval3(r).0;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }

    pub fn r_max(&self) -> f64 {
        *self.x.last().unwrap()
    }
}

/// `∫₀ʳ K` tabulated on a uniform grid and interpolated by cubic Hermite
/// polynomials using `K` as the derivative.
#[derive(Debug, Clone)]
pub struct KIntegralTable {
    dr: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl KIntegralTable {
    fn new(profile: &MetricProfile, dr: f64, r_max: f64) -> Result<Self> {
        if !(dr > 0.0 && r_max > 0.0) {
            return Err(Error::OutOfRange("table spacing and extent must be positive".into()));
        }
        let count = (r_max / dr).ceil() as usize + 1;
        let mut values = Vec::with_capacity(count);
        let mut slopes = Vec::with_capacity(count);
        let mut acc = 0.0;
        let mut k_prev = profile.k(0.0);
        values.push(0.0);
        slopes.push(k_prev);
        for i in 1..count {
            let (a, b) = ((i - 1) as f64 * dr, i as f64 * dr);
            let mut f = |r: f64| profile.k(r);
            acc += quadrature::gauss_kronrod_15(&mut f, a, b).0;
            k_prev = profile.k(b);
            values.push(acc);
            slopes.push(k_prev);
        }
        Ok(Self { dr, values, slopes })
    }

    pub fn r_max(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.dr
    }

    /// Interpolated `∫₀ʳ K`; extrapolates linearly with the end slope past the table.
    pub fn eval(&self, r: f64) -> f64 {
        let last = self.values.len() - 1;
        let x = r / self.dr;
        if x >= last as f64 {
            return self.values[last] + (r - self.r_max()) * self.slopes[last];
        }
        let i = (x.floor() as usize).min(last - 1);
        let t = x - i as f64;
        let (p0, p1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i] * self.dr, self.slopes[i + 1] * self.dr);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * p0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * p1
            + (t3 - t2) * m1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub profile: String,
    pub k_min: f64,
    pub k_max: f64,
    pub ellipticity_ok: bool,
    pub l1_dk: f64,
    pub l2_dk: f64,
    pub l1_d2k: f64,
    pub sup_r_dk: f64,
    pub sup_r2_d2k: f64,
    /// Outer-half share of each integral norm; small when the tails decay.
    pub tail_fraction: f64,
    pub norms_ok: bool,
    /// Decay exponent of `|K − 1|` fitted over the outer half of the grid.
    pub measured_decay: Option<f64>,
    pub decay_ok: bool,
    /// Smallest grid radius beyond which `n − 1 − rK′/K ≥ 0` on the grid.
    pub r2: f64,
    pub failures: Vec<String>,
    pub pass: bool,
}

const TAIL_FRACTION_LIMIT: f64 = 0.25;

/// Measure the long-range norms of `K′`, `K″` and the growth condition on `grid`.
///
/// `grid` must start at `0`, be increasing, and reach at least `10/ρ`.
pub fn validate_long_range(profile: &MetricProfile, grid: &[f64]) -> Result<ValidationReport> {
    if grid.len() < 3 || grid[0] != 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InsufficientDomain(
            "grid must start at 0 and be strictly increasing with at least 3 points".into(),
        ));
    }
    let r_max = *grid.last().unwrap();
    if profile.rho > 0.0 && r_max < 10.0 / profile.rho {
        return Err(Error::InsufficientDomain(format!(
            "grid reaches {r_max}, needs at least 10/rho = {}",
            10.0 / profile.rho
        )));
    }
    let n = profile.n as f64;
    let vals: Vec<(f64, f64, f64)> = grid.iter().map(|&r| profile.k3(r)).collect();
    let k_min = vals.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let k_max = vals.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let ellipticity_ok = k_min > profile.delta0 && k_max < 1.0 / profile.delta0;

    let abs_dk: Vec<f64> = vals.iter().map(|v| v.1.abs()).collect();
    let sq_dk: Vec<f64> = vals.iter().map(|v| v.1 * v.1).collect();
    let abs_d2k: Vec<f64> = vals.iter().map(|v| v.2.abs()).collect();
    let l1_dk = quadrature::trapezoid(grid, &abs_dk);
    let l2_dk = quadrature::trapezoid(grid, &sq_dk).sqrt();
    let l1_d2k = quadrature::trapezoid(grid, &abs_d2k);
    let sup_r_dk = grid.iter().zip(&abs_dk).map(|(r, d)| r * d).fold(0.0, f64::max);
    let sup_r2_d2k = grid
        .iter()
        .zip(&abs_d2k)
        .map(|(r, d)| r * r * d)
        .fold(0.0, f64::max);

    let half = grid.partition_point(|&r| r < 0.5 * r_max);
    let outer = |ys: &[f64]| -> f64 {
        let total = quadrature::trapezoid(grid, ys);
        if total == 0.0 {
            0.0
        } else {
            quadrature::trapezoid(&grid[half..], &ys[half..]) / total
        }
    };
    let tail_fraction = outer(&abs_dk).max(outer(&sq_dk)).max(outer(&abs_d2k));
    let finite = [l1_dk, l2_dk, l1_d2k, sup_r_dk, sup_r2_d2k]
        .iter()
        .all(|v| v.is_finite());
    let norms_ok = finite && tail_fraction < TAIL_FRACTION_LIMIT;

    let measured_decay = fit_decay(&grid[half..], &vals[half..]);
    let decay_ok = profile.rho > 0.0
        && match measured_decay {
            None => true, // K − 1 vanishes identically on the outer half.
            Some(e) => e > 0.0,
        };

    let mut r2 = 0.0;
    for (r, v) in grid.iter().zip(&vals).rev() {
        if n - 1.0 - r * v.1 / v.0 < 0.0 {
            r2 = *r;
            break;
        }
    }
    if r2 > 0.0 {
        // Report the next grid point, where the inequality starts holding.
        let idx = grid.partition_point(|&g| g <= r2);
        r2 = grid.get(idx).copied().unwrap_or(f64::INFINITY);
    }

    let mut failures = Vec::new();
    if !ellipticity_ok {
        failures.push(format!(
            "ellipticity: K in [{k_min}, {k_max}] not inside ({}, {})",
            profile.delta0,
            1.0 / profile.delta0
        ));
    }
    if !norms_ok {
        failures.push(format!(
            "norms: tail fraction {tail_fraction} of the derivative norms lies in the outer half"
        ));
    }
    if !decay_ok {
        failures.push(format!(
            "decay: declared rho {} with measured exponent {:?}",
            profile.rho, measured_decay
        ));
    }
    if !r2.is_finite() {
        failures.push("growth: n - 1 - rK'/K is negative at the end of the grid".into());
    }
    Ok(ValidationReport {
        profile: profile.name.clone(),
        k_min,
        k_max,
        ellipticity_ok,
        l1_dk,
        l2_dk,
        l1_d2k,
        sup_r_dk,
        sup_r2_d2k,
        tail_fraction,
        norms_ok,
        measured_decay,
        decay_ok,
        r2,
        pass: failures.is_empty(),
        failures,
    })
}

fn fit_decay(grid: &[f64], vals: &[(f64, f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = grid
        .iter()
        .zip(vals)
        .filter(|(r, v)| **r > 0.0 && (v.0 - 1.0).abs() > 1e-300)
        .map(|(r, v)| (r.ln(), (v.0 - 1.0).abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(-sxy / sxx)
}

/// Serializable metric description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub kind: String,
    pub n: usize,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub table: Option<Vec<[f64; 2]>>,
}

impl MetricConfig {
    pub fn build(&self) -> Result<MetricProfile> {
        match self.kind.as_str() {
            "flat" => MetricProfile::flat(self.n),
            "power" | "power-law" => {
                let c = self
                    .c
                    .ok_or_else(|| Error::Configuration("metric: missing key `c`".into()))?;
                let rho = self
                    .rho
                    .ok_or_else(|| Error::Configuration("metric: missing key `rho`".into()))?;
                MetricProfile::power_law(self.n, c, rho)
            }
            "table" | "tabulated" => {
                let table = self
                    .table
                    .as_ref()
                    .ok_or_else(|| Error::Configuration("metric: missing key `table`".into()))?;
                let rho = self
                    .rho
                    .ok_or_else(|| Error::Configuration("metric: missing key `rho`".into()))?;
                let pts: Vec<(f64, f64)> = table.iter().map(|p| (p[0], p[1])).collect();
                MetricProfile::tabulated(self.n, &pts, rho)
            }
            other => Err(Error::Configuration(format!("metric: unknown kind `{other}`"))),
        }
    }
}
