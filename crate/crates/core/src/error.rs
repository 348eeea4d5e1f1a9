use thiserror::Error;

#[derive(Debug, Error)]
pub enum CisError {
    #[error("{what}: expected size {expected}, got {actual}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {component} at step {step}")]
    NonFinite { component: String, step: u64 },
    #[error("non-finite activation after generator layer {layer}")]
    NonFiniteLayer { layer: usize },
    #[error("unknown channel kind `{0}`")]
    UnknownChannel(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CisError>;

pub(crate) fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(CisError::DimMismatch {
            what,
            expected,
            actual,
        })
    }
}
