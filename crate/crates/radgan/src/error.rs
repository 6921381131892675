use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] radgan_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Wav { path: PathBuf, source: hound::Error },
    #[error("{path}: unsupported WAV layout: {reason}")]
    WavFormat { path: PathBuf, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint fingerprint mismatch for {section}: checkpoint {checkpoint}, configuration {config}")]
    Fingerprint {
        section: String,
        checkpoint: String,
        config: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("output directory {0} exists; pass --force to overwrite")]
    OutputExists(PathBuf),
    /// A required command-line flag is missing for the resolved configuration.
    #[error("{message} (pass {flag})")]
    MissingFlag { flag: &'static str, message: String },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit code: 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingFlag { .. } | Error::OutputExists(_) | Error::Config(_) => 2,
            _ => 1,
        }
    }
}
