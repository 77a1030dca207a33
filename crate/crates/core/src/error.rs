use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid motion: {0}")]
    InvalidMotion(String),

    #[error("invalid control family: {0}")]
    InvalidFamily(String),

    #[error("invalid anchor set: {0}")]
    InvalidAnchors(String),

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("token id {id} out of range for codebook of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed container: {0}")]
    Container(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
