use std::path::PathBuf;

/// Errors produced by model construction, training, and snapshot I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration value (unknown arch, invalid scale, bad schedule).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation (shape mismatch, unknown layer tag).
    #[error("argument error: {0}")]
    Argument(String),

    /// The training loss became non-finite.
    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    /// A snapshot on disk is malformed. `offset` is the byte position at
    /// which the problem was detected, where that is meaningful.
    #[error("snapshot format error in {path}: {detail} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// A stored blob does not match its manifest checksum.
    #[error("checksum mismatch for {name} in {path}: expected {expected}, got {actual}")]
    Checksum {
        path: PathBuf,
        name: String,
        expected: String,
        actual: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
