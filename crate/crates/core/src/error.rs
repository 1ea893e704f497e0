use thiserror::Error;

/// Error type shared across the core modules.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value violates a structural constraint.
    #[error("invalid config: {0}")]
    Config(String),

    /// An input value is outside the operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A sampler was asked for more positions than the range holds.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A non-finite value appeared where finite math was required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint or corpus files failed to parse or verify.
    #[error("persistence error: {0}")]
    Persistence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
