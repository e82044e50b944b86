use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {0} is outside [0, 1]")]
    TimeDomain(f64),
    #[error("loss weight is singular at t = {0} (enable time clamping)")]
    Singularity(f64),
    #[error("radical inverse is defined for i >= 1 and base >= 2 (got i = {index}, base = {base})")]
    RadicalInverseDomain { index: u64, base: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("ingestion failed: {0}")]
    Ingestion(String),
    #[error("training diverged at step {step}: loss {loss}; diagnostic checkpoint at {checkpoint:?}")]
    Divergence {
        step: usize,
        loss: f64,
        checkpoint: Option<PathBuf>,
    },
    #[error("no valid positions in batch")]
    EmptyBatch,
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("io error on {path:?}: {source}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
