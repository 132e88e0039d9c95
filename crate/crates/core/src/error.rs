use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("spectral parameter off the allowed domain: {0}")]
    Domain(String),

    #[error("solver did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("ill-conditioned system (estimated condition number {condition:e})")]
    Conditioning { condition: f64 },

    #[error("spectral gap {gap:e} too small for power iteration")]
    DegenerateGap { gap: f64 },

    #[error("no separating annulus: {0}")]
    Separation(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("accuracy target missed: {0}")]
    Accuracy(String),

    #[error("decomposition ill-posed: pi_one_ratio {ratio:e} below {threshold:e}")]
    IllPosed { ratio: f64, threshold: f64 },

    #[error("linear algebra backend failed: {0}")]
    Backend(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Invalid(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
