//! Whisper-to-normal speech conversion.
//!
//! Pipeline: WAV -> log-mel features -> attention-guided adversarial
//! encoder-decoder trained with Siamese and identity constraints ->
//! mel inversion and Griffin-Lim synthesis -> F0-based evaluation.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod signal;
pub mod synth;
pub mod tensorcore;
pub mod training;
