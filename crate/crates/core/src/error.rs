//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}`: unknown dtype `{dtype}`")]
    UnknownDtype { name: String, dtype: String },

    #[error("tensor `{name}`: byte range overlaps tensor `{other}`")]
    OverlappingRanges { name: String, other: String },

    #[error("tensor `{name}`: declared range ends at byte {end}, payload has {payload_len}")]
    TruncatedPayload {
        name: String,
        end: usize,
        payload_len: usize,
    },

    #[error("tensor `{name}`: shape {shape:?} needs {expected} bytes, range has {found}")]
    ByteLengthMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} at position {position} is out of range (vocab {vocab_size})")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence length {len} not in 1..={max_seq}")]
    SequenceLength { len: usize, max_seq: usize },

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("template error: {0}")]
    Template(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("label `{0}` tokenizes to zero tokens")]
    EmptyLabel(String),

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("zero-norm vector: {0}")]
    ZeroVector(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("{0} is constant; correlation is undefined")]
    ConstantSequence(&'static str),

    #[error("need at least {needed} records, have {have}")]
    TooFewRecords { needed: usize, have: usize },

    #[error("singular kernel system (alpha = {alpha}); duplicate inputs need alpha > 0")]
    SingularSystem { alpha: f64 },

    #[error("only one class present after thresholding at {threshold}")]
    SingleClass { threshold: f64 },

    #[error("requested k = {k} exceeds {available} available documents")]
    KTooLarge { k: usize, available: usize },

    #[error("capture is missing {0}")]
    MissingCapture(String),

    #[error("capture does not match prompt: {0}")]
    CaptureMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
