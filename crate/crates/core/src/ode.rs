//! Dormand–Prince 5(4) integrator with step-size control and dense output.
//!
//! Works in either time direction. The stepper exposes single accepted steps
//! so callers can stop on events (thresholds, overflow guards) and read the
//! continuous extension on the step just taken.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step magnitude; chosen automatically when `None`.
    pub h_init: Option<f64>,
    /// Largest allowed step magnitude.
    pub h_max: f64,
    /// Steps smaller than `h_min_rel * max(|t|, 1)` abort with a step-size underflow.
    pub h_min_rel: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: None,
            h_max: f64::INFINITY,
            h_min_rel: 1e-14,
            max_steps: 5_000_000,
        }
    }
}

impl OdeOptions {
    pub fn with_tol(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

/// Continuous extension over one accepted step.
#[derive(Debug, Clone, Copy)]
pub struct DenseStep<const N: usize> {
    pub t0: f64,
    pub h: f64,
    rcont: [[f64; N]; 5],
}

impl<const N: usize> DenseStep<N> {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Interpolated state at `t`; accurate to fourth order inside the step.
    pub fn eval(&self, t: f64) -> [f64; N] {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        let r = &self.rcont;
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = r[0][i]
                + theta * (r[1][i] + theta1 * (r[2][i] + theta * (r[3][i] + theta1 * r[4][i])));
        }
        out
    }

    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = if self.h >= 0.0 {
            (self.t0, self.t0 + self.h)
        } else {
            (self.t0 + self.h, self.t0)
        };
        t >= lo && t <= hi
    }
}

pub struct Dopri5<const N: usize, F>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    f: F,
    t: f64,
    y: [f64; N],
    k1: [f64; N],
    h: f64,
    dir: f64,
    t_end: f64,
    opts: OdeOptions,
    steps: usize,
    evals: usize,
    last: Option<DenseStep<N>>,
}

impl<const N: usize, F> Dopri5<N, F>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    /// Prepare to integrate from `(t0, y0)` towards `t_end` (either direction).
    pub fn new(mut f: F, t0: f64, y0: [f64; N], t_end: f64, opts: OdeOptions) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite()) || y0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration("non-finite initial data".into()));
        }
        let dir = if t_end >= t0 { 1.0 } else { -1.0 };
        let k1 = f(t0, &y0);
        let mut s = Self {
            f,
            t: t0,
            y: y0,
            k1,
            h: 0.0,
            dir,
            t_end,
            opts,
            steps: 0,
            evals: 1,
            last: None,
        };
        s.h = match opts.h_init {
            Some(h) => dir * h.abs().min(opts.h_max),
            None => s.initial_step(),
        };
        Ok(s)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[f64; N] {
        &self.y
    }

    /// Derivative at the current point.
    pub fn dy(&self) -> &[f64; N] {
        &self.k1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn evaluations(&self) -> usize {
        self.evals
    }

    pub fn finished(&self) -> bool {
        (self.t_end - self.t) * self.dir <= 0.0
    }

    /// Dense output for the most recent accepted step.
    pub fn last_step(&self) -> Option<&DenseStep<N>> {
        self.last.as_ref()
    }

    fn scale(&self, a: &[f64; N], b: &[f64; N]) -> [f64; N] {
        let mut sk = [0.0; N];
        for i in 0..N {
            sk[i] = self.opts.atol + self.opts.rtol * a[i].abs().max(b[i].abs());
        }
        sk
    }

    fn initial_step(&mut self) -> f64 {
        let span = (self.t_end - self.t).abs();
        if span == 0.0 {
            return 0.0;
        }
        let sk = self.scale(&self.y, &self.y);
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..N {
            d0 += (self.y[i] / sk[i]).powi(2);
            d1 += (self.k1[i] / sk[i]).powi(2);
        }
        let n = N as f64;
        d0 = (d0 / n).sqrt();
        d1 = (d1 / n).sqrt();
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        h0 = h0.min(span).min(self.opts.h_max);
        let mut y1 = [0.0; N];
        for i in 0..N {
            y1[i] = self.y[i] + self.dir * h0 * self.k1[i];
        }
        let k2 = (self.f)(self.t + self.dir * h0, &y1);
        self.evals += 1;
        let mut d2 = 0.0;
        for i in 0..N {
            d2 += ((k2[i] - self.k1[i]) / sk[i]).powi(2);
        }
        d2 = (d2 / n).sqrt() / h0;
        let dmax = d1.max(d2);
        let h1 = if dmax <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dmax).powf(0.2)
        };
        self.dir * (100.0 * h0).min(h1).min(span).min(self.opts.h_max)
    }

    /// Take one accepted step (never past `t_end`). Returns the new time.
    pub fn step(&mut self) -> Result<f64> {
        if self.finished() {
            return Ok(self.t);
        }
        let mut fac_max = 10.0;
        loop {
            if self.steps >= self.opts.max_steps {
                return Err(Error::Integration(format!(
                    "step budget {} exhausted at t = {}",
                    self.opts.max_steps, self.t
                )));
            }
            let remaining = self.t_end - self.t;
            let mut h = self.h;
            if h.abs() > self.opts.h_max {
                h = self.dir * self.opts.h_max;
            }
            let last = h.abs() >= remaining.abs();
            if last {
                h = remaining;
            }
            let h_min = self.opts.h_min_rel * self.t.abs().max(1.0);
            if h.abs() < h_min && !last {
                return Err(Error::StepUnderflow { t: self.t, h });
            }

            let t = self.t;
            let y = self.y;
            let k1 = self.k1;
            let mut tmp = [0.0; N];

            for i in 0..N {
                tmp[i] = y[i] + h * A21 * k1[i];
            }
            let k2 = (self.f)(t + C2 * h, &tmp);
            for i in 0..N {
                tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            let k3 = (self.f)(t + C3 * h, &tmp);
            for i in 0..N {
                tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            let k4 = (self.f)(t + C4 * h, &tmp);
            for i in 0..N {
                tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            let k5 = (self.f)(t + C5 * h, &tmp);
            for i in 0..N {
                tmp[i] = y[i]
                    + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            let k6 = (self.f)(t + h, &tmp);
            let mut y1 = [0.0; N];
            for i in 0..N {
                y1[i] = y[i]
                    + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            let t1 = if last { self.t_end } else { t + h };
            let k7 = (self.f)(t1, &y1);
            self.evals += 6;

            let sk = self.scale(&y, &y1);
            let mut err = 0.0;
            let mut finite = true;
            for i in 0..N {
                let e = h
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
                err += (e / sk[i]).powi(2);
                finite &= y1[i].is_finite() && k7[i].is_finite();
            }
            err = (err / N as f64).sqrt();
            if !finite || !err.is_finite() {
                // Treat non-finite trial states as a hard rejection.
                self.h = h * 0.2;
                fac_max = 1.0;
                self.steps += 1;
                continue;
            }

            let fac = (0.9 * err.powf(-0.2)).clamp(0.2, fac_max);
            if err <= 1.0 {
                let mut rcont = [[0.0; N]; 5];
                for i in 0..N {
                    let ydiff = y1[i] - y[i];
                    let bspl = h * k1[i] - ydiff;
                    rcont[0][i] = y[i];
                    rcont[1][i] = ydiff;
                    rcont[2][i] = bspl;
                    rcont[3][i] = ydiff - h * k7[i] - bspl;
                    rcont[4][i] = h
                        * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                            + D7 * k7[i]);
                }
                self.last = Some(DenseStep { t0: t, h, rcont });
                self.t = t1;
                self.y = y1;
                self.k1 = k7;
                self.steps += 1;
                if !last {
                    self.h = h * fac;
                }
                return Ok(self.t);
            }
            self.h = h * fac;
            fac_max = 1.0;
            self.steps += 1;
        }
    }
}

/// Integrate to `t_end` and return the final state.
pub fn solve_to<const N: usize, F>(
    f: F,
    t0: f64,
    y0: [f64; N],
    t_end: f64,
    opts: OdeOptions,
) -> Result<[f64; N]>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    let mut s = Dopri5::new(f, t0, y0, t_end, opts)?;
    while !s.finished() {
        s.step()?;
    }
    Ok(*s.y())
}

/// Integrate from `t0` and return the state at each of the monotone `times`.
///
/// `times` must be ordered in the direction of integration and lie on the
/// far side of `t0`.
pub fn solve_at<const N: usize, F>(
    f: F,
    t0: f64,
    y0: [f64; N],
    times: &[f64],
    opts: OdeOptions,
) -> Result<Vec<[f64; N]>>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
{
    let Some(&t_end) = times.last() else {
        return Ok(Vec::new());
    };
    let mut s = Dopri5::new(f, t0, y0, t_end, opts)?;
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let mut out = Vec::with_capacity(times.len());
    let mut idx = 0;
    while idx < times.len() && (times[idx] - t0) * dir <= 0.0 {
        out.push(y0);
        idx += 1;
    }
    while idx < times.len() {
        s.step()?;
        let seg = *s.last_step().expect("step taken");
        while idx < times.len() && (times[idx] - s.t()) * dir <= 0.0 {
            out.push(if times[idx] == s.t() {
                *s.y()
            } else {
                seg.eval(times[idx])
            });
            idx += 1;
        }
    }
    Ok(out)
}
