//! Crate error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("batching: {0}")]
    Batch(String),

    #[error("model: {0}")]
    Model(String),

    #[error("non-finite activations in encoder layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("non-finite {task} loss at step {step}")]
    NonFiniteLoss { task: String, step: u64 },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI maps this error to: 2 for usage/config problems,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
