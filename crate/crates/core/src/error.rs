use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incomplete grid: {0} masked positions")]
    IncompleteGrid(usize),

    #[error("not enough distinct patches: found {found}, need {needed}")]
    NotEnoughPatches { found: usize, needed: usize },

    #[error("missing class {class} in {what}")]
    MissingClass { what: &'static str, class: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("quality gate failed: {0}")]
    Gate(String),

    #[error("unknown item ids: {0:?}")]
    UnknownIds(Vec<String>),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
