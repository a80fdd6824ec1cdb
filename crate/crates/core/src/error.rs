use std::path::PathBuf;

use domsim_nn::ParamIoError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // audio and spectrogram handling
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("audio contains a non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("clip has {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("spectrogram has no frames")]
    EmptySpectrogram,
    #[error("patches are not contiguous: {0}")]
    GapOrOverlap(String),
    #[error("frame count mismatch: expected {expected}, found {found}")]
    FrameCountMismatch { expected: usize, found: usize },
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    // encoders
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("classification data contains a single class")]
    SingleClassDataset,
    #[error("need at least 2 target utterances, got {0}")]
    TooFewUtterances(usize),
    #[error("no utterance is present under two or more channels")]
    NoParallelData,
    #[error("held-out channels cover every channel in the data")]
    HeldOutCoversAll,
    #[error("utterances do not share the same channel set")]
    RaggedChannelSets,
    #[error("need at least 2 channels per utterance, got {0}")]
    TooFewChannels(usize),
    #[error("sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("external tool failed: {0}")]
    ExternalTool(String),

    // networks and losses
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("no query patches")]
    EmptyQuerySet,
    #[error("expected {expected} feature layers, found {found}")]
    LayerMismatch { expected: usize, found: usize },

    // pipeline
    #[error("manifest `{0}` has no usable entries")]
    EmptyManifest(String),
    #[error("encoder produces {found}-dim embeddings, generator expects {expected}")]
    EncoderDimMismatch { expected: usize, found: usize },
    #[error("checkpoint version {found}, expected {expected}")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("no simulated pairs to adapt on")]
    EmptyPairs,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // analysis
    #[error("degenerate score table: {0}")]
    DegenerateTable(String),
    #[error("k = {0} outside the tabulated range 2..=10")]
    KOutOfTabulatedRange(usize),
    #[error("need at least 2 checkpoints")]
    MissingCheckpoints,
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Params(ParamIoError),
}

impl From<ParamIoError> for Error {
    fn from(e: ParamIoError) -> Self {
        match e {
            ParamIoError::Version { found, expected } => {
                Error::CheckpointVersionMismatch { found, expected }
            }
            ParamIoError::Io(io) => Error::Io(io),
            other => Error::Params(other),
        }
    }
}

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    CheckpointVersion,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::UnreadableFile { .. } | Error::Io(_) | Error::ExternalTool(_) => ErrorClass::Io,
            Error::CheckpointVersionMismatch { .. } => ErrorClass::CheckpointVersion,
            _ => ErrorClass::Validation,
        }
    }
}
