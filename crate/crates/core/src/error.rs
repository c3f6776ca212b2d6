use std::path::PathBuf;

/// Errors produced by the recovery pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("eta = {0} outside (0, 12^-1/2]")]
    InvalidEta(f64),

    #[error("latent draw pushes signal support outside the observation window ({0})")]
    SupportViolation(String),

    #[error("signal energy {0:e} is below tolerance; cannot calibrate amplitude")]
    ZeroEnergy(f64),

    #[error("fields live on different lattices")]
    LatticeMismatch,

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("bispectrum is degenerate: {0}")]
    DegenerateBispectrum(String),

    #[error("eta search objective is not unimodal")]
    SearchFailure { profile: Vec<(f64, f64)> },

    #[error("reference signal has zero norm")]
    ZeroReference,

    #[error("need at least 3 distinct sample sizes to fit a slope, got {0}")]
    InsufficientPoints(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
