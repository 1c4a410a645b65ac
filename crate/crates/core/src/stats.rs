//! Least-squares fits used for scaling exponents.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    /// Two-sided 95% confidence interval for the slope.
    pub slope_ci: (f64, f64),
    pub r_squared: f64,
    /// Coefficient of `x²` in a quadratic fit of the same data, in units of the slope
    /// per unit `x`; large values flag curvature in a log–log plot.
    pub curvature: f64,
    pub points: usize,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(Error::InsufficientData("x and y lengths differ".into()));
    }
    let m = x.len();
    if m < 3 {
        return Err(Error::InsufficientData(format!(
            "a fit with confidence interval needs at least 3 points, got {m}"
        )));
    }
    let mf = m as f64;
    let mx = x.iter().sum::<f64>() / mf;
    let my = y.iter().sum::<f64>() / mf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all x values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let slope_stderr = (sse / (mf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, mf - 2.0)
        .map_err(|e| Error::InsufficientData(e.to_string()))?
        .inverse_cdf(0.975);
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit {
        slope,
        intercept,
        slope_stderr,
        slope_ci: (slope - t * slope_stderr, slope + t * slope_stderr),
        r_squared,
        curvature: quadratic_coefficient(x, y),
        points: m,
    })
}

// Leading coefficient of the least-squares parabola through (x, y).
fn quadratic_coefficient(x: &[f64], y: &[f64]) -> f64 {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    // Center x to keep the normal equations well conditioned.
    let u: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let s = |p: i32| u.iter().map(|v| v.powi(p)).sum::<f64>();
    let t = |p: i32| u.iter().zip(y).map(|(v, w)| v.powi(p) * w).sum::<f64>();
    let a = [[m, s(1), s(2)], [s(1), s(2), s(3)], [s(2), s(3), s(4)]];
    let b = [t(0), t(1), t(2)];
    let det = |a: &[[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(&a);
    if d.abs() < 1e-300 {
        return 0.0;
    }
    let mut a2 = a;
    for (row, bv) in a2.iter_mut().zip(b) {
        row[2] = bv;
    }
    det(&a2) / d
}
