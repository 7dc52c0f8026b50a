use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to be actionable
/// without a debugger: shapes are spelled out, file problems carry line
/// numbers where available.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {lhs:?}, right is {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid dimension in {op}: {msg}")]
    InvalidDimension { op: &'static str, msg: String },

    #[error("numeric failure in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    #[error("scene data error at line {line}: {msg}")]
    SceneData { line: usize, msg: String },

    #[error("checkpoint error: {msg}")]
    Checkpoint { msg: String },

    #[error("configuration error: {msg}")]
    Config { msg: String },

    #[error("training error: {msg}")]
    Train { msg: String },

    #[error("evaluation error: {msg}")]
    Eval { msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
