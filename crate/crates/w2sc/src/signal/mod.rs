//! Audio I/O, STFT/mel analysis, mel inversion, and Griffin-Lim
//! reconstruction. All functions are pure; no shared mutable state.

mod griffin;
mod mel;
mod stft;
mod wav;


pub use griffin::{griffin_lim, GriffinLimResult};
pub use mel::{
    frame_silence_mask, invert_mel, load_mel, log_mel_frames, mel_spectrogram, min_max,
    normalize_log_mel, save_mel, MelFilterbank, MelSpectrogram, LOG_FLOOR, N_MELS,
};
pub use stft::{hann_window, istft, rect_window, stft, ComplexSpectrogram};
pub use wav::{load_wav, resample, save_wav, Waveform};

/// Analysis defaults: 16 kHz, 1024-point FFT, 256-sample hop, Hann window.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_N_FFT: usize = 1024;
pub const DEFAULT_HOP: usize = 256;
/// Frames more than this far below the utterance peak count as silence.
pub const DEFAULT_SILENCE_DB: f64 = 40.0;
