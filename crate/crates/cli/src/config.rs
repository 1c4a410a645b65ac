//! Experiment configuration. One TOML file carries every block; each
//! subcommand reads the blocks it needs and reports the first missing one.

use std::path::{Path, PathBuf};

use aeblow_core::damping::{DampingConfig, DampingProfile};
use aeblow_core::metric::{MetricConfig, MetricProfile};
use aeblow_core::testfn_critical::LambdaGrid;
use aeblow_core::wave_solver::{DataProfile, DataShape, Formulation, SolverConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub metric: Option<MetricConfig>,
    pub damping: Option<DampingConfig>,
    pub data: Option<DataBlock>,
    pub solver: Option<SolverBlock>,
    pub validate: Option<ValidateBlock>,
    pub eigen: Option<EigenBlock>,
    pub ode: Option<OdeBlock>,
    pub solve: Option<SolveBlock>,
    pub sweep: Option<SweepBlock>,
    pub critical: Option<CriticalBlock>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub shape: DataShape,
    #[serde(default = "unit")]
    pub r0: f64,
}

fn unit() -> f64 {
    1.0
}

/// Solver settings; `p` has no default because it selects the regime.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub p: f64,
    pub dr: Option<f64>,
    pub cfl: Option<f64>,
    pub t_max: Option<f64>,
    pub r_max: Option<f64>,
    pub nonlinear: Option<bool>,
    pub light_cone_mask: Option<bool>,
    pub kappa: Option<f64>,
    pub formulation: Option<Formulation>,
}

impl SolverBlock {
    pub fn build(&self) -> SolverConfig {
        let d = SolverConfig::default();
        SolverConfig {
            p: self.p,
            dr: self.dr.unwrap_or(d.dr),
            cfl: self.cfl.unwrap_or(d.cfl),
            t_max: self.t_max.unwrap_or(d.t_max),
            r_max: self.r_max.or(d.r_max),
            nonlinear: self.nonlinear.unwrap_or(d.nonlinear),
            light_cone_mask: self.light_cone_mask.unwrap_or(d.light_cone_mask),
            kappa: self.kappa.unwrap_or(d.kappa),
            formulation: self.formulation.unwrap_or(d.formulation),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateBlock {
    /// Outer radius of the validation grid; at least `10/ρ`.
    pub r_max: f64,
    #[serde(default = "validate_points")]
    pub points: usize,
    pub out: Option<PathBuf>,
}

fn validate_points() -> usize {
    4001
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenBlock {
    pub lambda: Vec<f64>,
    /// Outer radius; `50/λ` per value when absent.
    pub r_max: Option<f64>,
    pub dr: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeBlock {
    pub kato: Option<KatoBlock>,
    pub comparison: Option<ComparisonBlock>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KatoBlock {
    pub a: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "unit")]
    pub k: f64,
    pub deltas: Vec<f64>,
    #[serde(default = "kato_tol")]
    pub tol: f64,
    pub out: Option<PathBuf>,
    pub fit_out: Option<PathBuf>,
}

fn kato_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonBlock {
    pub lambda: Vec<f64>,
    /// Terminal time of the backward solution and horizon of the forward one.
    pub t: f64,
    #[serde(default = "comparison_samples")]
    pub samples: usize,
    pub out: Option<PathBuf>,
}

fn comparison_samples() -> usize {
    200
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveBlock {
    pub eps: f64,
    /// Record the functionals every this many steps.
    #[serde(default = "sample_every")]
    pub sample_every: usize,
    /// `λ` of the test function for `H` and `G`; omitted when absent.
    pub lambda: Option<f64>,
    /// Stop at blow-up levels `10⁶ε, 10⁸ε, 10¹⁰ε`.
    #[serde(default)]
    pub detect_blowup: bool,
    pub out: Option<PathBuf>,
    pub snapshots: Option<PathBuf>,
}

fn sample_every() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub eps_start: f64,
    pub eps_count: usize,
    #[serde(default = "sqrt2")]
    pub eps_ratio: f64,
    #[serde(default)]
    pub refine: bool,
    pub out: Option<PathBuf>,
    pub fit_out: Option<PathBuf>,
}

fn sqrt2() -> f64 {
    std::f64::consts::SQRT_2
}

/// `p` is a number or `"auto"`, which picks the critical power of the metric's dimension.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PowerChoice {
    Value(f64),
    Name(AutoPower),
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoPower {
    Auto,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticalBlock {
    pub p: PowerChoice,
    pub eps: f64,
    /// Times `T` at which the integral inequality is evaluated: `0, dt, …, t_end`.
    pub t_end: f64,
    #[serde(default = "critical_dt")]
    pub dt: f64,
    /// Range of `T` over which the ratios are minimized.
    pub window: Option<[f64; 2]>,
    #[serde(default)]
    pub lambda_grid: LambdaGrid,
    /// `T` values of the bound check on the comparison function.
    #[serde(default = "bound_times")]
    pub bound_times: Vec<f64>,
    pub out: Option<PathBuf>,
}

fn critical_dt() -> f64 {
    0.05
}

fn bound_times() -> Vec<f64> {
    vec![2.0, 5.0, 10.0]
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn metric(&self) -> Result<MetricProfile, CliError> {
        block(&self.metric, "metric")?.build().map_err(CliError::from_setup)
    }

    /// Zero damping when the block is absent.
    pub fn damping(&self) -> Result<DampingProfile, CliError> {
        match &self.damping {
            Some(d) => d.build().map_err(CliError::from_setup),
            None => Ok(DampingProfile::zero()),
        }
    }

    pub fn data(&self) -> Result<DataProfile, CliError> {
        let d = block(&self.data, "data")?;
        DataProfile::new(d.shape, d.r0).map_err(CliError::from_setup)
    }

    pub fn solver(&self) -> Result<SolverConfig, CliError> {
        Ok(block(&self.solver, "solver")?.build())
    }
}

pub fn block<'a, T>(b: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    b.as_ref()
        .ok_or_else(|| CliError::Config(format!("missing table `[{name}]`")))
}
