use std::path::PathBuf;

use gradkernel::KernelError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: field `{field}`: {msg}")]
    Schema { line: usize, field: String, msg: String },
    #[error("path {path_id}: {msg}")]
    PathInvariant { path_id: u64, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("infeasible allocation: {0}")]
    Infeasible(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Divergence { epoch: usize, batch: usize, msg: String },
    #[error("missing input {path}; run `lidda {producer}` first")]
    MissingStageInput { path: PathBuf, producer: &'static str },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
