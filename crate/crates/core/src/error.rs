use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid pose encoding: {0}")]
    InvalidEncoding(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty scene: operation requires at least one gaussian")]
    EmptyScene,

    #[error("invalid voxel size {0}: must be finite and > 0")]
    InvalidVoxelSize(f64),

    #[error("stale state: {0}")]
    StaleState(String),

    #[error("insufficient views: {0}")]
    InsufficientViews(String),

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unsupported spherical harmonics degree {0} (max 3)")]
    UnsupportedShDegree(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step} in term `{term}`")]
    NonFiniteLoss { step: usize, term: String },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }

    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage { stage, source: Box::new(source) }
    }
}
