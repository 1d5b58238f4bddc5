use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward called on non-scalar tensor of shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("empty loss: every row carries the ignore label")]
    EmptyLoss,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("index/sequence disagreement: index expects {expected} tokens, sequence has {actual}")]
    IndexMismatch { expected: usize, actual: usize },

    #[error("regenerate first: segmentation head needs {expected} tokens, got {actual}")]
    RegenerateFirst { expected: usize, actual: usize },

    #[error("parse error in {} at byte {offset}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint does not match config: {}", .0.join("; "))]
    CheckpointMismatch(Vec<String>),

    #[error("non-finite loss at iteration {iter} (lr {lr})")]
    NonFinite { iter: usize, lr: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
