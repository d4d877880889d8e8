use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdmError {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("step index {t} out of range 1..={max}")]
    IndexOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),

    #[error("prototype {0} has zero norm")]
    ZeroNormPrototype(usize),

    #[error("unknown label {0}")]
    UnknownLabel(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PdmError>;

impl PdmError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        PdmError::Io { path: path.as_ref().display().to_string(), source }
    }
}
