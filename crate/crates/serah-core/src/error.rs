use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grids are not aligned: {0}")]
    GridMismatch(String),
    #[error("source and target extents do not overlap")]
    EmptyOverlap,
    #[error("crop window out of bounds: origin ({0}, {1}) size {2} on {3}x{4} tile")]
    OutOfBounds(usize, usize, usize, usize, usize),
    #[error("no {0} acquisitions available for pairing")]
    EmptyOrbitList(&'static str),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("manifest error at line {line}: {message}")]
    Manifest { line: u64, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("tiff error on {path}: {message}")]
    Tiff { path: PathBuf, message: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] serah_nn::checkpoint::CheckpointError),
    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn tiff(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Tiff { path: path.into(), message: err.to_string() }
    }
}
