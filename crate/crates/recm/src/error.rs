use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecmError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("generated group exceeded {max_elems} elements (non-finite closure)")]
    NonFiniteClosure { max_elems: usize },
    #[error("support of size {got} exceeds exact-solver budget {budget}")]
    SupportBudget { got: usize, budget: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RecmError {
    pub fn contract(msg: impl Into<String>) -> Self {
        RecmError::Contract(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        RecmError::Dimension(msg.into())
    }
}
