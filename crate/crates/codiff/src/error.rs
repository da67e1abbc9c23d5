use std::path::PathBuf;

/// Errors produced by the codiff pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or image dimensions do not agree with the expected shape.
    #[error("shape mismatch for `{what}`: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    /// Division by a vanishing schedule coefficient.
    #[error("singularity: {0}")]
    Singularity(String),

    /// A loss or activation became non-finite during training.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Checkpoint file is missing, corrupt, or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An expected artifact (checkpoint, manifest, image) was not found.
    #[error("missing artifact: expected {0}")]
    MissingArtifact(PathBuf),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Complexity counting hit a layer kind it cannot model.
    #[error("unsupported layer kind(s) for complexity counting: {0}")]
    UnsupportedLayer(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
