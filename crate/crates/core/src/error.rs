use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("horizon {horizon} is not an integer multiple of the step {dt} (ratio {ratio})")]
    Alignment { horizon: f64, dt: f64, ratio: f64 },

    #[error("simulation failed on path {path} at step {step}: {what}")]
    Simulation { path: usize, step: usize, what: String },

    #[error("model capability missing: {0}")]
    Capability(String),

    #[error("model validation failed for {}: max mismatch {max_mismatch:e}", offenders.join(", "))]
    Validation { offenders: Vec<String>, max_mismatch: f64 },

    #[error("regression failed: {0}")]
    Regression(String),

    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config { line: None, message: msg.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
