use std::io;
use std::path::{Path, PathBuf};

use uad_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt volume: {0}")]
    CorruptVolume(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// 2 for bad input or flags, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Core(CoreError::Divergence { .. } | CoreError::BootstrapDegeneracy { .. } | CoreError::Placement { .. }) => 3,
            _ => 2,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}
