use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaglatError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cube does not intersect the grid")]
    EmptyCube,

    #[error("singular system: {0}")]
    Singular(String),

    #[error("spectral cache unavailable: {nodes} nodes exceeds cap {cap}; use shifted-inverse column solves instead")]
    SpectralCapExceeded { nodes: usize, cap: usize },

    #[error("flux mismatch: {0}")]
    FluxMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MaglatError>;
