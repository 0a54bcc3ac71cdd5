use thiserror::Error;

pub type Result<T> = std::result::Result<T, FmError>;

#[derive(Debug, Error)]
pub enum FmError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape { op: &'static str, lhs: String, rhs: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity showed up in a named intermediate.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("training diverged at step {step}: non-finite value in {layer}")]
    Diverged { step: usize, layer: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FmError {
    pub(crate) fn shape(op: &'static str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug) -> Self {
        FmError::Shape {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        FmError::NonFinite { what: what.into() }
    }

    /// True for failures that come from the numbers rather than from the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, FmError::NonFinite { .. } | FmError::Diverged { .. })
    }
}
