use std::path::PathBuf;

use crate::scene::Category;

/// Errors produced by the primscene library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("matrix is not positive-definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("invalid cholesky parameters: {0}")]
    InvalidCholesky(String),
    #[error("invalid scale: {0}")]
    InvalidScale(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no normalization statistics for category {0:?}")]
    MissingStats(Category),
    #[error("instance {0} not found")]
    NotFound(u32),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("geometry error in ground polygon {polygon}: {reason}")]
    Geometry { polygon: usize, reason: String },
    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("non-positive variance {0}")]
    InvalidVariance(f64),
    #[error("invalid moments: {0}")]
    InvalidMoments(String),
    #[error("denoiser unavailable: {0}")]
    DenoiserUnavailable(String),
    #[error("denoiser protocol error: {0}")]
    Protocol(String),
    #[error("overlapping blocks disagree at cell ({y}, {x})")]
    InconsistentOverlap { y: i64, x: i64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: msg.into(),
        }
    }
}
