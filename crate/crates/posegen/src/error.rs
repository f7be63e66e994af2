use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error in {path}: {msg}")]
    DataFile { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Data(_)
            | Error::DataFile { .. }
            | Error::Io(_)
            | Error::Image(_)
            | Error::Checkpoint(_)
            | Error::Incompatible(_) => 2,
            _ => 1,
        }
    }
}
