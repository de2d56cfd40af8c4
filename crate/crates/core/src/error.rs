use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiamError>;

#[derive(Debug, Error)]
pub enum DiamError {
    #[error("non-finite numeric input: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("invalid task: {0}")]
    Task(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimization diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("metric undefined for group `{0}`: no class with a non-empty union")]
    MetricUndefined(&'static str),

    #[error("bad task file: {0}")]
    Format(String),

    #[error("corrupt task file in section `{section}`: {detail}")]
    Corruption {
        section: &'static str,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> DiamError {
    DiamError::Shape(msg.into())
}
