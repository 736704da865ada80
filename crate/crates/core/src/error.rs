use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("particle {index} at ({q}, {p}) lies outside the quadrature box")]
    GridCoverage { index: usize, q: f64, p: f64 },

    #[error("degenerate potential energy surfaces at q = {q} (gap {gap:e})")]
    DegeneratePes { q: f64, gap: f64 },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("relative energy drift {drift:e} at t = {t} exceeds the abort threshold {limit:e}")]
    EnergyDrift { t: f64, drift: f64, limit: f64 },

    #[error("Hamiltonian is not in factorized two-mode form: {0}")]
    Decomposition(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {message}")]
    ConfigParse { path: PathBuf, line: usize, message: String },

    #[error("invalid configuration: {}", .keys.join(", "))]
    ConfigValidation { keys: Vec<String> },

    #[error("incompatible runs: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Configuration problems are reported separately from solver failures.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::ConfigParse { .. } | Error::ConfigValidation { .. } | Error::InvalidInput(_)
        )
    }
}
