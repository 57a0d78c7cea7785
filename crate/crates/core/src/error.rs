use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage, attached to errors that escape [`crate::refine::run_pipeline`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Locate,
    Init,
    Refine,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Locate => "locate",
            Stage::Init => "init",
            Stage::Refine => "refine",
        })
    }
}

/// Failures reported by an oracle implementation, local or remote.
#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("oracle protocol error: {0}")]
    Protocol(String),
    #[error("bridge reported failure: {0}")]
    Bridge(String),
    #[error("bridge process unavailable: {0}")]
    Unavailable(String),
    #[error("mock oracle has no registered spec for {0}")]
    NoSpec(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value at point {index} ({field})")]
    Data { index: usize, field: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate scale: monocular disparity has zero spread")]
    DegenerateScale,
    #[error("degenerate target: rendered disparity has zero spread")]
    DegenerateTarget,
    #[error("calibration needs at least 2 jointly valid pixels, found {0}")]
    TooFewPixels(usize),
    #[error("localization failed: prompt produced no edit region in any view")]
    LocalizationFailed,
    #[error("initialization failed: no masked pixel had a valid depth ({skipped} skipped)")]
    InitializationFailed { skipped: usize },
    #[error("oracle failure on view {view}")]
    Oracle {
        view: usize,
        #[source]
        source: OracleError,
    },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("optimizer step {iteration} left Gaussian {index} with a non-finite parameter")]
    NonFiniteParameters { iteration: usize, index: usize },
    #[error("{stage} stage failed")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
