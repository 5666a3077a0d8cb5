use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}:{line}: malformed manifest line: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{path}: integrity error: {msg}")]
    Integrity { path: PathBuf, msg: String },
    #[error("checkpoint holds tensors the model does not know: {}", .0.join(", "))]
    UnknownTensors(Vec<String>),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing {what}; run `{producer}` first")]
    Dependency { what: String, producer: String },
    #[error(transparent)]
    Core(#[from] speechlm_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
