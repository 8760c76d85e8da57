use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("box ({x1}, {y1}, {x2}, {y2}) lies entirely outside the {w}x{h} feature map")]
    BoxOutOfBounds {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        w: usize,
        h: usize,
    },

    #[error("box degenerates to zero area after clipping")]
    DegenerateBox,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("output directory is locked by another run: {0}")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
