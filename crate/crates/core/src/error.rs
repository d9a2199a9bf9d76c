use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("divisibility: {0}")]
    Divisibility(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checkpoint mismatch: missing [{}], unexpected [{}], wrong shape [{}]", missing.join(", "), extra.join(", "), reshaped.join(", "))]
    CheckpointMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
        reshaped: Vec<String>,
    },

    #[error("gradient tape already replayed; reset it before calling backward again")]
    TapeConsumed,

    #[error("unknown id(s): {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
