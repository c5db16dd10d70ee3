use lanepred_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("degenerate polyline: {0}")]
    Degenerate(String),
    #[error("off-map scene {scene_id}: no lane segment within {radius} m of the target")]
    OffMap { scene_id: String, radius: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("probabilities not normalized (sum {0})")]
    Unnormalized(f64),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
