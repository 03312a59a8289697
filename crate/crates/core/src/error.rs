use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("utterance too short: {samples} samples, need at least {window} for one frame")]
    UtteranceTooShort { samples: usize, window: usize },

    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("symbol {symbol:?} is not in the alphabet")]
    UnknownSymbol { symbol: String },

    #[error("no word occurs at least {min_count} times; vocabulary would be empty")]
    EmptyVocabulary { min_count: u64 },

    #[error("target longer than input admits: {frames} frames, target needs {required}")]
    Infeasible { frames: usize, required: usize },

    #[error("instance too large for enumeration: {paths} paths")]
    InstanceTooLarge { paths: f64 },

    #[error("beam search found no complete lexicon hypothesis")]
    NoCompleteHypothesis,

    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("non-finite gradient at layer {layer}")]
    NonFiniteGradient { layer: String },

    #[error("batch norm needs at least 2 utterances per training batch, got {0}")]
    BatchTooSmall(usize),

    #[error("reference corpus has no tokens")]
    EmptyReference,

    #[error("unpaired corpora: {refs} references vs {hyps} hypotheses")]
    Unpaired { refs: usize, hyps: usize },

    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint built with different vocabulary")]
    VocabularyMismatch,

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad feature file: {0}")]
    FeatureFile(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
