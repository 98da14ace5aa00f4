use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image dimension {width}x{height} too small for proposals (need at least 3x3)")]
    DegenerateBox { width: u32, height: u32 },

    #[error("invalid box [{x0},{y0},{x1},{y1}]: must satisfy x0 < x1 and y0 < y1")]
    EmptyBox { x0: u32, y0: u32, x1: u32, y1: u32 },

    #[error("box [{x0},{y0},{x1},{y1}] lies outside the {width}x{height} image")]
    BoxOutOfBounds {
        x0: u32,
        y0: u32,
        x1: u32,
        y1: u32,
        width: u32,
        height: u32,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("feature contains a non-finite value at index {index}")]
    NonFiniteFeature { index: usize },

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("unknown image id `{0}`")]
    UnknownId(String),

    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("no pixel coverage: cannot fuse an empty rank set")]
    NoCoverage,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// I/O failure on `path`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
