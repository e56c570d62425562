use std::path::PathBuf;

/// Errors produced while reading or validating a weight container.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor `{tensor}` has unsupported dtype `{dtype}`")]
    UnknownDtype { tensor: String, dtype: String },
    #[error("tensor `{tensor}` overlaps tensor `{other}` in the data section")]
    Overlap { tensor: String, other: String },
    #[error("tensor `{tensor}` lies outside the data section")]
    OutOfBounds { tensor: String },
    #[error("tensor `{tensor}` shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{tensor}` is missing")]
    MissingTensor { tensor: String },
    #[error("tensor `{tensor}` appears more than once")]
    DuplicateTensor { tensor: String },
    #[error("schema error: {0}")]
    Schema(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("token id {id} at position {position} is out of range for vocabulary size {vocab}")]
    TokenOutOfRange { position: usize, id: u32, vocab: usize },
    /// `layer` is 0 for the embedding, `1..=L` for decoder layers and `L + 1`
    /// for the final norm / output head.
    #[error("numeric fault: non-finite values first appear at layer {layer}")]
    NumericFault { layer: usize },
    #[error("numeric fault: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("detection failed: {0}")]
    Detection(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
