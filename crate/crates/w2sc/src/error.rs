//! Error types shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward called twice on the same tape")]
    BackwardTwice,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed WAV {path}: {reason}")]
    MalformedWav { path: String, reason: String },
    #[error("unsupported WAV encoding in {path}: {reason}")]
    UnsupportedWav { path: String, reason: String },
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("filterbank does not match n_fft: {0}")]
    FilterbankMismatch(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty corpus or utterance")]
    EmptyInput,
    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("empty sequence")]
    EmptySequence,
    #[error("no aligned pairs remain after filtering")]
    NoPairs,
}
