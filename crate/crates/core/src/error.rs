use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GtrsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GtrsError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid skeleton: {0}")]
    Skeleton(String),

    #[error("degenerate graph: row {row} of the adjacency sums to zero")]
    DegenerateGraph { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("procrustes alignment failed: {0}")]
    Alignment(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GtrsError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GtrsError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GtrsError::Io {
            path: path.into(),
            source,
        }
    }
}
