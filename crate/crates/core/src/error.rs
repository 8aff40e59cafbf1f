use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed archive header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload for tensor {tensor}: need {needed} bytes, {available} available")]
    TruncatedPayload {
        tensor: String,
        needed: u64,
        available: u64,
    },

    #[error("duplicate tensor name {0:?}")]
    DuplicateTensor(String),

    #[error("non-finite element in tensor {tensor} at flat index {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor {0}: element count does not match shape")]
    ElementCount(String),

    #[error("tensor name mismatch: {left:?} vs {right:?}")]
    NameMismatch { left: String, right: String },

    #[error(
        "tensor sets differ: missing from domain archive {missing_in_domain:?}, \
         missing from retrieval archive {missing_in_retrieval:?}"
    )]
    TensorSetMismatch {
        missing_in_domain: Vec<String>,
        missing_in_retrieval: Vec<String>,
    },

    #[error("tensor {name}: layer index {index} out of range for {total_layers} layers")]
    LayerOutOfRange {
        name: String,
        index: usize,
        total_layers: usize,
    },

    #[error("tensor {0}: unparseable layer index")]
    BadLayerIndex(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("query sets differ between the two systems")]
    QuerySetMismatch,

    #[error("need at least 2 paired observations, got {0}")]
    TooFewPairs(usize),

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
