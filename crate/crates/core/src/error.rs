use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid disparity {0}")]
    InvalidDisparity(f64),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("too few points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("normal equations are rank deficient")]
    RankDeficient,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("instance {0} has no usable residuals")]
    EmptyProblem(u32),

    #[error("no motion for instance {0}")]
    MissingMotion(u32),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status for this error: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::MissingFile(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::DimensionMismatch(_)
            | Error::MissingMotion(_)
            | Error::InvalidDisparity(_) => 2,
            Error::BehindCamera { .. }
            | Error::DegenerateGeometry(_)
            | Error::TooFewPoints { .. }
            | Error::RankDeficient
            | Error::NonFinite(_)
            | Error::EmptyProblem(_) => 3,
        }
    }
}
