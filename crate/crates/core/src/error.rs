use thiserror::Error;

/// Errors produced by the relighting engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: header declares {expected} bytes, file holds {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),

    #[error("non-positive DC coefficient ({0})")]
    NonPositiveDc(f64),

    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),

    #[error("ill-conditioned lighting system (eigenvalue ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("divergence at iteration {iteration}: loss is {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("image codec error: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
