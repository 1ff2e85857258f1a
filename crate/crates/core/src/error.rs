use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("could not decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("image has zero size: {0}")]
    ZeroSizeImage(PathBuf),

    #[error("invalid resize target {height}x{width} (both sides must be >= 16)")]
    InvalidTarget { height: usize, width: usize },

    #[error("could not write {path}: {reason}")]
    Write { path: PathBuf, reason: String },

    #[error("invalid image tensor: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel count {channels} is not divisible by reduction ratio {ratio}")]
    ReductionMismatch { channels: usize, ratio: usize },

    #[error("content has {content} channels but style has {style}")]
    ChannelMismatch { content: usize, style: usize },

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("input {height}x{width} is smaller than the minimum {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("style encoder must be frozen before it is used as a loss network")]
    EncoderNotFrozen,

    #[error("feature extractor output mismatch: {0}")]
    ExtractorShapeMismatch(String),

    #[error("feature extractor unavailable: {0}")]
    ExtractorUnavailable(String),

    #[error("loss term `{0}` is not finite")]
    NonFiniteTerm(&'static str),

    #[error("epoch {epoch} outside [0, {total}]")]
    OutOfRangeEpoch { epoch: usize, total: usize },

    #[error("corpus cannot provide valid triplets: {0}")]
    InsufficientCorpus(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    DivergenceDetected { epoch: usize },

    #[error("non-finite loss at step {step} (batch items {batch:?})")]
    NonFiniteLoss { step: usize, batch: Vec<usize> },

    #[error("empty input")]
    EmptyInput,

    #[error("invalid cluster count k={k} for {n} items")]
    InvalidClusterCount { k: usize, n: usize },

    #[error("culling would remove every image")]
    AllCulled,

    #[error("directory contains no images: {0}")]
    EmptyDirectory(PathBuf),

    #[error("dataset incomplete, missing: {}", missing.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    IncompleteDataset { missing: Vec<PathBuf> },

    #[error("covariance needs at least 2 samples, got {0}")]
    DegenerateCovariance(usize),

    #[error("checkpoint format version {found}, expected {expected}")]
    CheckpointVersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
