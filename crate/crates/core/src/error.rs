use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dataset record {record} failed checksum: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch {
        record: usize,
        stored: u32,
        computed: u32,
    },

    #[error("dataset payload truncated while reading record {record}: {detail}")]
    TruncatedRecord { record: usize, detail: String },

    #[error("dataset manifest claims {manifest} records but payload holds {found}")]
    RecordCountMismatch { manifest: usize, found: usize },

    #[error("non-finite loss at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    NonFiniteLoss { step: usize, lr: f64, grad_norm: f64 },
}

/// Shorthand for building a contract-violation error.
pub fn contract(msg: impl Into<String>) -> CoreError {
    CoreError::Contract(msg.into())
}
