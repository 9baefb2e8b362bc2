use thiserror::Error;

#[derive(Debug, Error)]
pub enum DdmError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("time {t} outside {range}")]
    TimeOutOfRange { t: f64, range: &'static str },
    #[error(
        "sine attenuation cannot reach target {target} with slope {slope} (coordinate {coord})"
    )]
    Unsolvable {
        coord: usize,
        target: f64,
        slope: f64,
    },
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DdmError> = std::result::Result<T, E>;
