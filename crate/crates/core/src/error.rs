use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerically unstable: {0}")]
    NumericallyUnstable(String),

    #[error("optimization diverged at iteration {iteration} (frame {frame:?}): non-finite loss")]
    Diverged { frame: Option<usize>, iteration: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("dataset has no frames")]
    EmptyDataset,

    #[error("failed to load {context}: {reason}")]
    Load { context: String, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a frame index to a divergence raised inside a per-frame phase.
    pub fn with_frame(self, frame: usize) -> Self {
        match self {
            Error::Diverged { iteration, .. } => Error::Diverged {
                frame: Some(frame),
                iteration,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
