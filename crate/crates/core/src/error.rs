use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("container: bad magic {0:?} (expected \"P360\")")]
    BadMagic([u8; 4]),

    #[error("container: unsupported format version {0}")]
    BadVersion(u8),

    #[error("container: truncated while reading {0}")]
    Truncated(&'static str),

    #[error("container: extents of `{name}` overflow ({extents:?})")]
    ExtentOverflow { name: String, extents: Vec<u64> },

    #[error("container: entry name is not UTF-8")]
    BadName,

    #[error("scene spec line {line}: {msg}")]
    SceneSpec { line: usize, msg: String },

    #[error("ppm: {0}")]
    Ppm(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
