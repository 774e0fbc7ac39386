use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("split is degenerate: {height}x{width} image cannot hold two {min_patch}px patches per side")]
    SplitDegenerate {
        height: usize,
        width: usize,
        min_patch: usize,
    },

    #[error("patches leave pixel ({row}, {col}) uncovered")]
    MergeCoverage { row: usize, col: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("label {value} out of range (max class {max})")]
    LabelOutOfRange { value: u8, max: u8 },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("model {}: {message}", path.display())]
    Model { path: PathBuf, message: String },

    #[error("backend failure running {}: {message}", path.display())]
    Backend { path: PathBuf, message: String },

    #[error("manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("corrupt header in {}: {message}", path.display())]
    CorruptHeader { path: PathBuf, message: String },

    #[error("unknown class name {0:?}")]
    UnknownClass(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
