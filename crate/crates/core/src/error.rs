use thiserror::Error;

/// Errors raised anywhere in the forecasting stack.
#[derive(Debug, Error)]
pub enum ManfError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("relative offset {offset} exceeds position table size {max}")]
    TableSize { offset: usize, max: usize },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("singular bijection: {0}")]
    Singular(String),
    #[error("format error at row {row}: {msg}")]
    Format { row: usize, msg: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("insufficient coverage: {0}")]
    Coverage(String),
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error("checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("data mismatch: {0}")]
    DataMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ManfError>;

impl ManfError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        ManfError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        ManfError::NonFinite {
            context: context.into(),
        }
    }
}
