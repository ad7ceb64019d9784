use thiserror::Error;
use vton_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at step {step}: {detail}")]
    Training { step: u64, detail: String },
    #[error("sampling produced non-finite latents at t={t}")]
    Sampling { t: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image format error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
