//! STFT and inverse STFT with reflect padding on the right edge.
//!
//! Frame `t` covers samples `[t*hop, t*hop + n_fft)`; the frame count is
//! `1 + floor(len / hop)`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::wav::Waveform;
use crate::error::SignalError;

#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    /// T x (1 + n_fft/2), row-major.
    pub frames: Vec<Complex<f64>>,
    pub n_frames: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub window: Vec<f64>,
}

impl ComplexSpectrogram {
    pub fn n_bins(&self) -> usize {
        1 + self.n_fft / 2
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.frames.iter().map(|c| c.norm()).collect()
    }
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn rect_window(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

fn reflect_pad(samples: &[f32], padded_len: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(padded_len);
    out.extend(samples.iter().map(|&s| s as f64));
    // Reflect about the last sample; degenerate short signals fall back to
    // cycling what exists.
    let mut i = 0usize;
    while out.len() < padded_len {
        let idx = if n >= 2 {
            let m = 2 * (n - 1);
            let k = (n + i) % m;
            if k < n {
                k
            } else {
                m - k
            }
        } else {
            0
        };
        out.push(samples[idx] as f64);
        i += 1;
    }
    out
}

pub fn stft(
    wav: &Waveform,
    n_fft: usize,
    hop: usize,
    window: &[f64],
) -> Result<ComplexSpectrogram, SignalError> {
    assert!(n_fft.is_power_of_two(), "n_fft must be a power of two");
    assert!(hop <= n_fft && hop > 0, "hop must be in (0, n_fft]");
    assert_eq!(window.len(), n_fft, "window length must equal n_fft");
    if wav.samples.is_empty() {
        return Err(SignalError::EmptyWaveform);
    }
    let n_frames = 1 + wav.samples.len() / hop;
    let padded = reflect_pad(&wav.samples, (n_frames - 1) * hop + n_fft);
    let n_bins = 1 + n_fft / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut frames = Vec::with_capacity(n_frames * n_bins);
    for t in 0..n_frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[t * hop + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.extend_from_slice(&buf[..n_bins]);
    }
    Ok(ComplexSpectrogram {
        frames,
        n_frames,
        n_fft,
        hop,
        window: window.to_vec(),
    })
}

/// Weighted overlap-add inverse; `out_len` crops the synthesized signal
/// (pass `(T-1)*hop + n_fft` for no cropping).
pub fn istft(spec: &ComplexSpectrogram, out_len: usize, sample_rate: u32) -> Waveform {
    let n_fft = spec.n_fft;
    let n_bins = spec.n_bins();
    let full_len = (spec.n_frames.max(1) - 1) * spec.hop + n_fft;
    let mut acc = vec![0.0f64; full_len];
    let mut wsum = vec![0.0f64; full_len];
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..spec.n_frames {
        let row = &spec.frames[t * n_bins..(t + 1) * n_bins];
        buf[..n_bins].copy_from_slice(row);
        for k in 1..n_fft / 2 {
            buf[n_fft - k] = row[k].conj();
        }
        fft.process(&mut buf);
        let scale = 1.0 / n_fft as f64;
        for i in 0..n_fft {
            let s = buf[i].re * scale;
            acc[t * spec.hop + i] += s * spec.window[i];
            wsum[t * spec.hop + i] += spec.window[i] * spec.window[i];
        }
    }
    let mut samples = Vec::with_capacity(out_len);
    for i in 0..out_len.min(full_len) {
        let w = wsum[i];
        samples.push(if w > 1e-9 { (acc[i] / w) as f32 } else { 0.0 });
    }
    samples.resize(out_len, 0.0);
    Waveform::new(samples, sample_rate)
}
