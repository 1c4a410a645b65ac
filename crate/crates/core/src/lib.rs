//! Numerical laboratory for semilinear wave blow-up on asymptotically
//! Euclidean radial metrics with integrable damping.

pub mod damping;
pub mod entire_solutions;
pub mod lifespan;
pub mod error;
pub mod metric;
pub mod ode;
pub mod ode_lab;
pub mod quadrature;
pub mod stats;
pub mod testfn_critical;
pub mod wave_solver;

pub use error::{Error, Result};
