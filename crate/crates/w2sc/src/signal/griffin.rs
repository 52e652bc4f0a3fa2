//! Griffin-Lim phase reconstruction.

use rustfft::num_complex::Complex;

use super::stft::{istft, stft, ComplexSpectrogram};
use super::wav::Waveform;

/// Iterative phase estimation from a nonnegative `T x (1 + n_fft/2)`
/// magnitude matrix: start from a fixed seeded random phase, then
/// repeatedly resynthesize, re-analyze, and restore the target magnitude.
///
/// Zero initial phase looks simpler but parks tonal inputs near a symmetric
/// stationary region the iteration escapes only very slowly; a random phase
/// field converges several times faster at the same iteration budget.
pub struct GriffinLimResult {
    pub waveform: Waveform,
    /// Spectral convergence error `|| |STFT(x)| - mag || / ||mag||` after
    /// each iteration.
    pub convergence: Vec<f64>,
}

pub fn griffin_lim(
    mag: &[f64],
    n_frames: usize,
    iterations: usize,
    n_fft: usize,
    hop: usize,
    window: &[f64],
    sample_rate: u32,
) -> GriffinLimResult {
    assert!(iterations >= 1);
    let n_bins = 1 + n_fft / 2;
    assert_eq!(mag.len(), n_frames * n_bins, "magnitude matrix shape");
    // Length chosen so re-analysis yields exactly n_frames again:
    // 1 + floor(out_len / hop) == n_frames.
    let out_len = if n_frames == 0 {
        0
    } else {
        ((n_frames - 1) * hop).max(1)
    };
    let mag_norm: f64 = mag.iter().map(|&m| m * m).sum::<f64>().sqrt();
    if out_len == 0 || mag_norm == 0.0 {
        return GriffinLimResult {
            waveform: Waveform::new(vec![0.0; out_len], sample_rate),
            convergence: vec![0.0; iterations],
        };
    }

    // Deterministic random initial phase (splitmix64 over a fixed seed).
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    let mut next_phase = move || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        let unit = (z ^ (z >> 31)) as f64 / u64::MAX as f64;
        2.0 * std::f64::consts::PI * unit
    };
    let mut spec = ComplexSpectrogram {
        frames: mag
            .iter()
            .map(|&m| Complex::from_polar(m, next_phase()))
            .collect(),
        n_frames,
        n_fft,
        hop,
        window: window.to_vec(),
    };
    let mut wav = istft(&spec, out_len, sample_rate);
    let mut convergence = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let estimate = stft(&wav, n_fft, hop, window).expect("non-empty by construction");
        let mut err = 0.0;
        for (i, c) in estimate.frames.iter().enumerate() {
            let d = c.norm() - mag[i];
            err += d * d;
            let phase = if c.norm() > 1e-12 {
                c / c.norm()
            } else {
                Complex::new(1.0, 0.0)
            };
            spec.frames[i] = phase * mag[i];
        }
        convergence.push(err.sqrt() / mag_norm);
        wav = istft(&spec, out_len, sample_rate);
    }
    GriffinLimResult {
        waveform: wav,
        convergence,
    }
}
