//! Mel filterbank construction, log-mel feature extraction, the MEL1 file
//! format, and regularized mel inversion.

use std::io::Read;
use std::path::Path;

use super::stft::{stft, ComplexSpectrogram};
use super::wav::Waveform;
use crate::error::SignalError;

pub const N_MELS: usize = 128;
pub const LOG_FLOOR: f64 = 1e-5;

/// Triangular mel filterbank (HTK mel scale), `N_MELS x (1 + n_fft/2)`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub n_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, f_min: f64, f_max: f64) -> Self {
        let n_bins = 1 + n_fft / 2;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        // N_MELS + 2 edge points define N_MELS triangles.
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; N_MELS * n_bins];
        for m in 0..N_MELS {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                weights[m * n_bins + k] = w;
            }
            // Narrow filters can miss every bin; claim the nearest one so
            // each row keeps at least one positive entry.
            if weights[m * n_bins..(m + 1) * n_bins].iter().all(|&w| w == 0.0) {
                let k = (center / bin_hz).round() as usize;
                weights[m * n_bins + k.min(n_bins - 1)] = 1.0;
            }
        }
        MelFilterbank {
            weights,
            n_bins,
            f_min,
            f_max,
            sample_rate,
        }
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Time x 128 normalized log-mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// Row-major, `n_frames x N_MELS`, values in `[-1, 1]`.
    pub frames: Vec<f32>,
    /// (min, max) of the raw log-mel domain used for normalization.
    pub norm_stats: (f32, f32),
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len() / N_MELS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * N_MELS..(t + 1) * N_MELS]
    }

    /// Raw log-mel value of a normalized entry.
    pub fn denormalize(&self, v: f32) -> f64 {
        let (lo, hi) = (self.norm_stats.0 as f64, self.norm_stats.1 as f64);
        if hi <= lo {
            return lo;
        }
        (v as f64 + 1.0) / 2.0 * (hi - lo) + lo
    }
}

/// Raw (unnormalized) log-mel frames of one utterance.
pub fn log_mel_frames(
    wav: &Waveform,
    fb: &MelFilterbank,
    n_fft: usize,
    hop: usize,
    window: &[f64],
) -> Result<Vec<f64>, SignalError> {
    if fb.n_bins != 1 + n_fft / 2 {
        return Err(SignalError::FilterbankMismatch(format!(
            "filterbank has {} bins, n_fft {} implies {}",
            fb.n_bins,
            n_fft,
            1 + n_fft / 2
        )));
    }
    let spec = stft(wav, n_fft, hop, window)?;
    Ok(log_mel_from_spec(&spec, fb))
}

pub fn log_mel_from_spec(spec: &ComplexSpectrogram, fb: &MelFilterbank) -> Vec<f64> {
    let n_bins = spec.n_bins();
    let mut out = Vec::with_capacity(spec.n_frames * N_MELS);
    for t in 0..spec.n_frames {
        let frame = &spec.frames[t * n_bins..(t + 1) * n_bins];
        for m in 0..N_MELS {
            let row = fb.row(m);
            let mut acc = 0.0;
            for (k, c) in frame.iter().enumerate() {
                if row[k] != 0.0 {
                    acc += row[k] * c.norm();
                }
            }
            out.push(acc.max(LOG_FLOOR).ln());
        }
    }
    out
}

/// Map raw log-mel values into `[-1, 1]` with the given (min, max) stats;
/// values outside the stats range are clipped.
pub fn normalize_log_mel(raw: &[f64], stats: (f32, f32)) -> MelSpectrogram {
    let (lo, hi) = (stats.0 as f64, stats.1 as f64);
    let frames = raw
        .iter()
        .map(|&v| {
            if hi <= lo {
                0.0
            } else {
                ((v - lo) / (hi - lo) * 2.0 - 1.0).clamp(-1.0, 1.0) as f32
            }
        })
        .collect();
    MelSpectrogram {
        frames,
        norm_stats: stats,
    }
}

pub fn min_max(raw: &[f64]) -> (f32, f32) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in raw {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo as f32, hi as f32)
}

/// One-call extraction with per-utterance or provided stats.
pub fn mel_spectrogram(
    wav: &Waveform,
    fb: &MelFilterbank,
    n_fft: usize,
    hop: usize,
    window: &[f64],
    stats: Option<(f32, f32)>,
) -> Result<MelSpectrogram, SignalError> {
    let raw = log_mel_frames(wav, fb, n_fft, hop, window)?;
    let stats = stats.unwrap_or_else(|| min_max(&raw));
    Ok(normalize_log_mel(&raw, stats))
}

/// Recover a nonnegative `T x (1 + n_fft/2)` linear magnitude matrix from
/// normalized log-mel features by regularized least squares against the
/// filterbank; negative solutions are clipped to zero.
pub fn invert_mel(m: &MelSpectrogram, fb: &MelFilterbank) -> Vec<f64> {
    let n_bins = fb.n_bins;
    let t_frames = m.n_frames();
    // A = F^T F + lambda I, factored once per call.
    let lambda = 1e-4;
    let mut a = vec![0.0f64; n_bins * n_bins];
    for mel in 0..N_MELS {
        let row = fb.row(mel);
        for i in 0..n_bins {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..n_bins {
                if row[j] != 0.0 {
                    a[i * n_bins + j] += row[i] * row[j];
                }
            }
        }
    }
    for i in 0..n_bins {
        a[i * n_bins + i] += lambda;
    }
    let chol = cholesky(&a, n_bins);
    let mut out = vec![0.0f64; t_frames * n_bins];
    let mut rhs = vec![0.0f64; n_bins];
    for t in 0..t_frames {
        let frame = m.frame(t);
        rhs.iter_mut().for_each(|v| *v = 0.0);
        for mel in 0..N_MELS {
            let target = m.denormalize(frame[mel]).exp();
            let row = fb.row(mel);
            for k in 0..n_bins {
                if row[k] != 0.0 {
                    rhs[k] += row[k] * target;
                }
            }
        }
        let sol = chol_solve(&chol, n_bins, &rhs);
        for (k, &v) in sol.iter().enumerate() {
            out[t * n_bins + k] = v.max(0.0);
        }
    }
    out
}

fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                l[i * n + i] = sum.max(1e-12).sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    l
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// True where a frame's energy sits more than `threshold_db` below the
/// utterance's loudest frame.
pub fn frame_silence_mask(m: &MelSpectrogram, threshold_db: f64) -> Vec<bool> {
    let t_frames = m.n_frames();
    let mut energy_db = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let e: f64 = m.frame(t).iter().map(|&v| m.denormalize(v).exp()).sum();
        energy_db.push(10.0 * e.max(1e-30).log10());
    }
    let peak = energy_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    energy_db.iter().map(|&e| e < peak - threshold_db).collect()
}

const MEL_MAGIC: &[u8; 9] = b"W2SC-MEL1";

/// Persist features: magic, u32 T, u32 128, f32 LE row-major data, then the
/// two f32 normalization stats.
pub fn save_mel(path: &Path, m: &MelSpectrogram) -> Result<(), SignalError> {
    let mut out = Vec::with_capacity(13 + m.frames.len() * 4 + 8);
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(m.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
    for &v in &m.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&m.norm_stats.0.to_le_bytes());
    out.extend_from_slice(&m.norm_stats.1.to_le_bytes());
    std::fs::write(path, out).map_err(|e| SignalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_mel(path: &Path) -> Result<MelSpectrogram, SignalError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| SignalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    let malformed = |reason: &str| SignalError::MalformedWav {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 17 || &bytes[..9] != MEL_MAGIC {
        return Err(malformed("bad MEL1 magic"));
    }
    let t = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    if width != N_MELS {
        return Err(malformed("feature width is not 128"));
    }
    let expected = 17 + t * N_MELS * 4 + 8;
    if bytes.len() != expected {
        return Err(malformed("truncated MEL1 payload"));
    }
    let mut frames = Vec::with_capacity(t * N_MELS);
    for i in 0..t * N_MELS {
        let off = 17 + i * 4;
        frames.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    let off = 17 + t * N_MELS * 4;
    let lo = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let hi = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
    Ok(MelSpectrogram {
        frames,
        norm_stats: (lo, hi),
    })
}
