use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("fully masked attention row {row}")]
    FullyMaskedRow { row: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("size guard: {what} = {got} exceeds limit {limit}")]
    SizeGuard {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numerical health: {0}")]
    Numerical(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("record of length {len} does not fit sequence length {seq_len} (needs {needed})")]
    RecordTooLong {
        len: usize,
        seq_len: usize,
        needed: usize,
    },

    #[error("degenerate model: outcome mass {mass:e} at position {position}")]
    DegenerateModel { position: usize, mass: f64 },

    #[error("training failure: {0}")]
    Training(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
