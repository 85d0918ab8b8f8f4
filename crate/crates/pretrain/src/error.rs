use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] rtd_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint does not match the configured model: {0}")]
    ConfigMismatch(String),

    #[error("non-finite training state at phase {phase} step {step}: {detail}; last good state saved to {checkpoint}")]
    Diverged {
        phase: usize,
        step: u64,
        detail: String,
        checkpoint: PathBuf,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
