use std::path::PathBuf;

/// Errors for dataset construction, trigger generation, and analysis.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] grond_core::Error),

    #[error("argument error: {0}")]
    Argument(String),

    /// Dataset file problems, naming the offending file.
    #[error("ingestion error for {file}: {detail}")]
    Ingestion { file: PathBuf, detail: String },

    /// Clean-label poisoning asked for more target-class samples than exist.
    #[error("clean-label capacity exceeded: need {needed} target-class samples, have {available}")]
    Capacity { needed: usize, available: usize },

    /// A mask/trigger optimization lost its footing.
    #[error("optimization error: {0}")]
    Optimization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
