use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {}: at offset {offset}: {detail}", file.display())]
    Malformed {
        file: PathBuf,
        offset: usize,
        detail: String,
    },

    #[error("netpbm decode error: {0}")]
    Netpbm(String),

    #[error("manifest mismatch for {path}: {detail}")]
    Manifest { path: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}
