use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid timestamp: {0}")]
    InvalidTimestamp(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("input window has no time steps")]
    EmptyWindow,
    #[error("vision features have no spatial tokens")]
    EmptyVision,
    #[error("attribution sums to zero")]
    DegenerateAttribution,
    #[error("reports are not comparable: {0}")]
    Comparison(String),
    #[error("model does not support attribution: {0}")]
    UnsupportedModel(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] vnnet_ingest::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(what: &str, values: &vnnet_autograd::Tensor) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
