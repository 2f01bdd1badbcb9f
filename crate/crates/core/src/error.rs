use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Two operands disagree on a specific axis.
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: String,
        got: String,
    },

    /// The requested configuration cannot produce a valid output
    /// (e.g. non-positive output extent, indivisible channels).
    #[error("{op}: invalid configuration: {msg}")]
    Config { op: &'static str, msg: String },

    /// A call-contract violation that is not tied to one axis
    /// (non-scalar loss, tensors from different graphs, ...).
    #[error("{op}: contract violation: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Raised by the finite-difference oracle itself.
    #[error("finite-difference oracle: {msg}")]
    Oracle { msg: String },
}

impl TensorError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract { op, msg: msg.into() }
    }

    pub(crate) fn config(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Config { op, msg: msg.into() }
    }
}
