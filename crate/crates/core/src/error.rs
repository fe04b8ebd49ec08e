use std::io;

use thiserror::Error;

pub type Result<T, E = HstError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HstError {
    /// Incompatible or illegal tensor extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Token layout that cannot be mapped onto a spatial grid.
    #[error("layout error: {0}")]
    Layout(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Backbone taps and side-network blocks do not line up.
    #[error("wiring error: {0}")]
    Wiring(String),

    /// API misuse, e.g. backward on a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checksum mismatch at byte offset {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    Corrupt { offset: u64, stored: u32, computed: u32 },

    #[error("non-finite loss {loss}; offending tensors: {}", offending.join(", "))]
    NonFinite { loss: f64, offending: Vec<String> },

    #[error("audit error: {0}")]
    Audit(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HstError {
    pub fn dimension(msg: impl Into<String>) -> Self {
        HstError::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        HstError::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        HstError::Format {
            offset,
            message: msg.into(),
        }
    }
}
