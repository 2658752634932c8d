use thiserror::Error;

/// Unified error type for the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("teacher error: {0}")]
    Teacher(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("quantizer error: {0}")]
    Quantizer(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
