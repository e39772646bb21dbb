use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the distillation pipeline.
#[derive(Debug, Error)]
pub enum NpdError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unconditioned loss {loss:e} below division guard {epsilon:e}")]
    DivisionGuard { loss: f64, epsilon: f64 },

    #[error("sequence {id} has length {len}, exceeding pack length {pack_len}")]
    OversizeSequence { id: u64, len: usize, pack_len: usize },

    #[error("stale artifact: {0}")]
    Staleness(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("no trajectories survived filtering (of {total}); consider relaxing tau")]
    FilterStarvation { total: usize },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NpdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            NpdError::MissingArtifact(path)
        } else {
            NpdError::Io { path, source }
        }
    }
}

pub type Result<T> = std::result::Result<T, NpdError>;
