use std::path::PathBuf;

use storyldm_autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown entity `{0}` (not in the name→pronoun map)")]
    UnknownEntity(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{what} {value} out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: i64,
        range: String,
    },
    #[error("memory has no features for resolution {0}")]
    MissingResolution(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged at step {step} (loss {loss}); last good checkpoint: {last_good:?}")]
    Diverged {
        step: u64,
        loss: f64,
        last_good: Option<PathBuf>,
    },
    #[error("{what} reached {got:.4}, below required {required:.4}")]
    BelowThreshold {
        what: &'static str,
        got: f64,
        required: f64,
    },
    #[error("session was created with checkpoint {session} but model is {model}")]
    CheckpointMismatch { session: String, model: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
