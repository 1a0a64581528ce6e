use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undistortion did not converge for pixel ({0:.3}, {1:.3})")]
    Divergence(f64, f64),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("two-view initialization rejected: {0}")]
    InitRejected(String),

    #[error("frame {frame} could not be registered: {reason}")]
    RegistrationFailed { frame: u32, reason: String },

    #[error("reconstruction failed: {0}")]
    ReconstructionFailed(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Tags an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}
