use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {what} = {value} ({reason})")]
    Domain {
        what: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("singular point: {0}")]
    Singularity(&'static str),

    #[error("insufficient domain: {0}")]
    InsufficientDomain(String),

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    Configuration(String),

    #[error("step size underflow at t = {t} (h = {h})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("integration failed: {0}")]
    Integration(String),

    #[error("overflow while integrating at r = {0}")]
    Overflow(f64),

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("no blow-up detected up to t = {0}")]
    NoBlowup(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("finite speed of propagation violated at t = {t}: slack {slack} below tolerance {tolerance}")]
    FiniteSpeedViolation { t: f64, slack: f64, tolerance: f64 },
}

impl Error {
    pub(crate) fn domain(what: &'static str, value: f64, reason: &'static str) -> Self {
        Error::Domain {
            what,
            value,
            reason,
        }
    }
}
