use drivecap_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("sequence length {len} exceeds context window {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("non-finite loss at {at}: {value}")]
    NonFiniteLoss { at: String, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
