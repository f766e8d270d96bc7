use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error in `{tensor}`: {detail}")]
    Numeric { tensor: String, detail: String },
    #[error("singularity: {0}")]
    Singularity(String),
    #[error("training aborted at step {step}: {detail}")]
    Training { step: u64, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numeric(tensor: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            tensor: tensor.into(),
            detail: detail.into(),
        }
    }
}
