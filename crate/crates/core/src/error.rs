use xmprobe_nn::NnError;

use crate::synthworld::DatasetError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("sequence of length {len} exceeds the context window of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("frozen weights changed during {stage}: {which} checksum {before} -> {after}")]
    FrozenWeightsChanged { stage: String, which: String, before: String, after: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("token group `{0}` has no positions")]
    EmptyGroup(String),
    #[error("SAE trained for layer {sae} applied to activations from layer {acts}")]
    LayerMismatch { sae: usize, acts: usize },
    #[error("quality target missed: {0}")]
    QualityTarget(String),
    #[error("bad config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
