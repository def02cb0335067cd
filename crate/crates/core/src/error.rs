use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value in {op}")]
    Numeric { op: &'static str },
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("invalid input at position {position}: {reason}")]
    Input { position: usize, reason: String },
    #[error("pattern `{0}` matches no parameter")]
    Selector(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("incompatible base model: {0}")]
    Compatibility(String),
    #[error("operation not supported for this method: {0}")]
    Method(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}
