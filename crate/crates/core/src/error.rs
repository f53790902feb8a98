use std::path::PathBuf;

use slowfast_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{frames} frames exceed the context window of {max}")]
    ContextWindow { frames: usize, max: usize },
    #[error("unknown action id {0}")]
    UnknownAction(usize),
    #[error("unknown action name `{0}`")]
    UnknownActionName(String),
    #[error("the null action is not an environment action")]
    NullAction,
    #[error("frame count {got} does not match chunk spec ({expected} expected)")]
    FrameCount { got: usize, expected: usize },
    #[error("world too small: {0}")]
    WorldTooSmall(String),
    #[error("non-finite latent at sampling step {step}")]
    NonFiniteLatent { step: usize },
    #[error("non-finite loss at step {step} (samples {samples:?})")]
    NonFiniteLoss { step: u64, samples: Vec<usize> },
    #[error("LoRA rank {rank} exceeds min dimension of `{point}` ({m}x{n})")]
    RankTooLarge { point: String, rank: usize, m: usize, n: usize },
    #[error("`{0}` is not a LoRA injection point")]
    NotInjectionPoint(String),
    #[error("session has not been initialised with a first frame")]
    Uninitialised,
    #[error("no generated chunk to learn from")]
    NothingGenerated,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { stored: u32, computed: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
