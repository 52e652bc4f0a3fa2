//! Python bindings for the conversion pipeline.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use w2sc::config::RunConfig;
use w2sc::evaluation::{dtw_align, estimate_f0, mel_cepstral_distortion, F0Options};
use w2sc::signal::{
    frame_silence_mask, griffin_lim, hann_window, invert_mel, log_mel_frames, min_max,
    normalize_log_mel, MelFilterbank, MelSpectrogram, N_MELS,
};
use w2sc::training::{Checkpoint, TrainState};

fn val_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Waveform", skip_from_py_object)]
#[derive(Clone)]
struct PyWaveform {
    inner: w2sc::signal::Waveform,
}

#[pymethods]
impl PyWaveform {
    #[new]
    fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        PyWaveform {
            inner: w2sc::signal::Waveform::new(samples, sample_rate),
        }
    }

    #[staticmethod]
    fn load(path: &str, target_rate: Option<u32>) -> PyResult<Self> {
        Ok(PyWaveform {
            inner: w2sc::signal::load_wav(Path::new(path), target_rate)
                .map_err(|e| PyIOError::new_err(e.to_string()))?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        w2sc::signal::save_wav(Path::new(path), &self.inner)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn samples(&self) -> Vec<f32> {
        self.inner.samples.clone()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate
    }

    fn rms(&self) -> f64 {
        self.inner.rms()
    }

    /// (per-frame f0 in Hz with 0 = unvoiced, voiced fraction)
    fn f0_track(&self) -> (Vec<f64>, f64) {
        let track = estimate_f0(&self.inner, &F0Options::default());
        let vf = track.voiced_fraction();
        (track.f0, vf)
    }
}

#[pyclass(name = "MelSpectrogram", skip_from_py_object)]
#[derive(Clone)]
struct PyMel {
    inner: MelSpectrogram,
}

#[pymethods]
impl PyMel {
    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn n_mels(&self) -> usize {
        N_MELS
    }

    /// Row-major (frame, band) values in [-1, 1].
    fn frames(&self) -> Vec<f32> {
        self.inner.frames.clone()
    }

    #[getter]
    fn norm_stats(&self) -> (f32, f32) {
        self.inner.norm_stats
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyMel {
            inner: w2sc::signal::load_mel(Path::new(path))
                .map_err(|e| PyIOError::new_err(e.to_string()))?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        w2sc::signal::save_mel(Path::new(path), &self.inner)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }
}

/// Log-mel features with per-utterance normalization stats.
#[pyfunction]
#[pyo3(signature = (wav, stats=None))]
fn extract_mel(wav: &PyWaveform, stats: Option<(f32, f32)>) -> PyResult<PyMel> {
    let cfg = RunConfig::default();
    let fb = MelFilterbank::new(
        wav.inner.sample_rate,
        cfg.signal_n_fft,
        cfg.signal_f_min,
        cfg.signal_f_max,
    );
    let window = hann_window(cfg.signal_n_fft);
    let raw = log_mel_frames(&wav.inner, &fb, cfg.signal_n_fft, cfg.signal_hop, &window)
        .map_err(val_err)?;
    let stats = stats.unwrap_or_else(|| min_max(&raw));
    Ok(PyMel {
        inner: normalize_log_mel(&raw, stats),
    })
}

/// Mel inversion + Griffin-Lim back to audio.
#[pyfunction]
#[pyo3(signature = (mel, iterations=60))]
fn synthesize(mel: &PyMel, iterations: usize) -> PyResult<PyWaveform> {
    let cfg = RunConfig::default();
    let fb = MelFilterbank::new(
        cfg.signal_sample_rate,
        cfg.signal_n_fft,
        cfg.signal_f_min,
        cfg.signal_f_max,
    );
    let window = hann_window(cfg.signal_n_fft);
    let mag = invert_mel(&mel.inner, &fb);
    let result = griffin_lim(
        &mag,
        mel.inner.n_frames(),
        iterations.max(1),
        cfg.signal_n_fft,
        cfg.signal_hop,
        &window,
        cfg.signal_sample_rate,
    );
    Ok(PyWaveform {
        inner: result.waveform,
    })
}

/// One synthetic whisper/normal pair.
#[pyfunction]
fn synth_pair(seed: u64, duration_s: f64, sample_rate: u32) -> (PyWaveform, PyWaveform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = w2sc::synth::synth_pair(&mut rng, duration_s, sample_rate);
    (
        PyWaveform {
            inner: pair.whisper,
        },
        PyWaveform { inner: pair.normal },
    )
}

/// Run whisper features through the generator stored in a checkpoint.
#[pyfunction]
fn convert(checkpoint_path: &str, mel: &PyMel) -> PyResult<PyMel> {
    let ckpt = Checkpoint::load(Path::new(checkpoint_path)).map_err(val_err)?;
    let state = TrainState::from_checkpoint(&ckpt).map_err(val_err)?;
    Ok(PyMel {
        inner: w2sc::training::convert_utterance(&state.gen, &mel.inner).map_err(val_err)?,
    })
}

/// DTW -> MCD between two feature matrices, reported in dB.
#[pyfunction]
fn mcd(converted: &PyMel, reference: &PyMel) -> PyResult<f64> {
    let path = dtw_align(&converted.inner.frames, &reference.inner.frames, N_MELS)
        .map_err(val_err)?;
    Ok(mel_cepstral_distortion(&converted.inner, &reference.inner, &path))
}

/// Per-frame silence flags at the default 40 dB threshold.
#[pyfunction]
fn silence_mask(mel: &PyMel) -> Vec<bool> {
    frame_silence_mask(&mel.inner, 40.0)
}

#[pymodule]
fn w2sc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWaveform>()?;
    m.add_class::<PyMel>()?;
    m.add_function(wrap_pyfunction!(extract_mel, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(synth_pair, m)?)?;
    m.add_function(wrap_pyfunction!(convert, m)?)?;
    m.add_function(wrap_pyfunction!(mcd, m)?)?;
    m.add_function(wrap_pyfunction!(silence_mask, m)?)?;
    Ok(())
}
