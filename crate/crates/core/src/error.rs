use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the reconstruction stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate schedule: alpha_bar is zero at step {step}")]
    DegenerateSchedule { step: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("numeric divergence at reverse step {step} (timestep {timestep})")]
    NumericDivergence { step: usize, timestep: usize },

    #[error("model state error: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the experiment runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Protocol(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::State(_) => 3,
            Error::NumericDivergence { .. }
            | Error::DegenerateSchedule { .. }
            | Error::DegenerateBatch(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::param(format!(
            "{what}: expected shape {want:?}, got {got:?}"
        )));
    }
    Ok(())
}
