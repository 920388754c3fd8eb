use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A precondition on the inputs does not hold (dimension, range, sign).
    #[error("invalid input: {0}")]
    Input(String),
    /// The computation produced a non-finite or otherwise unusable number.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// The requested quantity needs something the inputs do not provide
    /// (second derivatives, a disabled error source, an unsupported kernel).
    #[error("unsupported: {0}")]
    Capability(String),
    /// A Monte Carlo budget would exceed the configured cost ceiling.
    #[error("budget exceeded: estimated cost {estimated:.3e} > ceiling {ceiling:.3e}")]
    Budget { estimated: f64, ceiling: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}

pub(crate) fn ensure_finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("{what} is not finite ({x})")))
    }
}
