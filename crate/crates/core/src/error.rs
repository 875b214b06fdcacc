use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "CTC target of length {target_len} with {repeats} adjacent repeats needs at least \
         {needed} timesteps, logits have {timesteps}"
    )]
    CtcInfeasible { target_len: usize, repeats: usize, needed: usize, timesteps: usize },

    #[error("symbol {symbol} is outside the label space of size {classes}")]
    SymbolOutOfRange { symbol: usize, classes: usize },

    #[error("character {0:?} is not in the alphabet")]
    UnknownCharacter(char),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged in stage {stage} ({name}) at epoch {epoch}: loss is not finite")]
    Diverged { stage: usize, name: String, epoch: usize },

    #[error("scene placement unsatisfiable: {0}")]
    Placement(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("manifest parse error: {0}")]
    Manifest(String),

    #[error("payload truncated: tensor `{name}` needs bytes up to {needed}, file payload has {available}")]
    Truncated { name: String, needed: usize, available: usize },

    #[error("shape disagreement for tensor `{name}`: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },

    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset at {0} is empty")]
    Empty(PathBuf),

    #[error("image {image} referenced by {labels} line {line} does not exist")]
    MissingImage { image: PathBuf, labels: PathBuf, line: usize },

    #[error("malformed label line {line} in {path}: {reason}")]
    MalformedLabel { path: PathBuf, line: usize, reason: String },

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("image {path} is {found_w}x{found_h}, expected {expected_w}x{expected_h}")]
    SizeMismatch { path: PathBuf, found_w: usize, found_h: usize, expected_w: usize, expected_h: usize },
}
