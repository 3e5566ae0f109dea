use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): coordinates must satisfy 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("{got} proposals exceed target {target}: truncate by detector score before padding")]
    TooManyProposals { got: usize, target: usize },

    #[error("non-finite value in feature grid")]
    NonFiniteGrid,

    #[error("non-finite gradient in parameter '{name}' at step {step}")]
    NonFiniteGradient { name: String, step: u64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("config hash mismatch: weight file has {file:#018x}, run config has {expected:#018x}")]
    ConfigHashMismatch { file: u64, expected: u64 },

    #[error("split {0} is empty")]
    EmptySplit(u8),

    #[error("config: {0}")]
    Config(String),

    #[error("file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
