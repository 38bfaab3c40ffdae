use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input too short: {len} samples, need at least {needed}")]
    InputTooShort { len: usize, needed: usize },

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad feature file {path}: {reason}")]
    BadFeatureFile { path: PathBuf, reason: String },

    #[error("feature dim mismatch: expected {expected}, got {got}")]
    FeatureDimMismatch { expected: usize, got: usize },

    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocabulary(String),

    #[error("out-of-vocabulary words: {}", .0.join(", "))]
    OutOfVocabularyWords(Vec<String>),

    #[error("unknown phone symbol {symbol:?} in lexicon entry for {word:?}")]
    UnknownPhone { word: String, symbol: String },

    #[error("bad lexicon line {line}: {reason}")]
    BadLexicon { line: usize, reason: String },

    #[error("bad duration file {path}: {reason}")]
    BadDurations { path: PathBuf, reason: String },

    #[error("duration mismatch for {utt}: durations sum to {sum}, mel has {frames} frames")]
    DurationMismatch { utt: String, sum: usize, frames: usize },

    #[error("{utt}: {source}")]
    Utterance { utt: String, source: Box<Error> },

    #[error("corpus errors: {}", .0.join("; "))]
    Corpus(Vec<String>),

    #[error("insufficient utterances for split: {}", .0.join(", "))]
    InsufficientUtterances(Vec<String>),

    #[error("split failed: {0}")]
    Split(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("phone id {id} out of range for inventory of size {size}")]
    PhoneOutOfRange { id: u32, size: usize },

    #[error("unknown speaker id {id} (table has {n_speakers})")]
    UnknownSpeaker { id: u32, n_speakers: usize },

    #[error("empty regulated sequence")]
    EmptyRegulatedSequence,

    #[error("learning-rate schedule is undefined at step 0")]
    StepZero,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage {stage} requires {requirement}")]
    MissingPrerequisite { stage: u8, requirement: String },

    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },

    #[error("no aligned speech encoder: checkpoint is from stage {0}")]
    NoAlignedSpeechEncoder(u8),

    #[error("no vocoder configured")]
    NoVocoder,

    #[error("external command `{cmd}` failed ({status}): {stderr}")]
    Adapter { cmd: String, status: String, stderr: String },

    #[error("word error rate undefined: empty reference with {0} hypothesis words")]
    UndefinedWer(usize),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
