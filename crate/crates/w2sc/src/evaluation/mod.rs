//! F0 estimation, DTW alignment, F0 RMSE, and mel-cepstral distortion.

use crate::error::EvalError;
use crate::signal::{MelSpectrogram, Waveform, N_MELS};

/// Per-frame fundamental frequency in Hz; 0 marks unvoiced frames.
#[derive(Clone, Debug)]
pub struct F0Track {
    pub f0: Vec<f64>,
    pub hop_seconds: f64,
}

impl F0Track {
    pub fn voiced_fraction(&self) -> f64 {
        if self.f0.is_empty() {
            return 0.0;
        }
        self.f0.iter().filter(|&&f| f > 0.0).count() as f64 / self.f0.len() as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct F0Options {
    pub floor_hz: f64,
    pub ceil_hz: f64,
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Normalized autocorrelation peak below this is unvoiced.
    pub voicing_threshold: f64,
}

impl Default for F0Options {
    fn default() -> Self {
        F0Options {
            floor_hz: 60.0,
            ceil_hz: 400.0,
            frame_ms: 25.0,
            hop_ms: 10.0,
            // Shaped aspiration noise reaches NAC peaks around 0.3-0.4 in a
            // 25 ms frame, so the cut sits above that while periodic frames
            // (NAC near 1) clear it easily.
            voicing_threshold: 0.45,
        }
    }
}

/// Autocorrelation pitch tracker with parabolic peak refinement.
pub fn estimate_f0(w: &Waveform, opts: &F0Options) -> F0Track {
    let sr = w.sample_rate as f64;
    let frame_len = ((opts.frame_ms / 1000.0) * sr).round() as usize;
    let hop = (((opts.hop_ms / 1000.0) * sr).round() as usize).max(1);
    let hop_seconds = hop as f64 / sr;
    let lag_min = ((sr / opts.ceil_hz).floor() as usize).max(1);
    let lag_max = (sr / opts.floor_hz).ceil() as usize;
    let mut f0 = Vec::new();
    if w.samples.len() < frame_len || lag_max >= frame_len {
        return F0Track { f0, hop_seconds };
    }
    let n_frames = (w.samples.len() - frame_len) / hop + 1;
    for t in 0..n_frames {
        let frame = &w.samples[t * hop..t * hop + frame_len];
        let mean = frame.iter().map(|&s| s as f64).sum::<f64>() / frame_len as f64;
        let x: Vec<f64> = frame.iter().map(|&s| s as f64 - mean).collect();
        let r0: f64 = x.iter().map(|v| v * v).sum();
        if r0 < 1e-10 {
            f0.push(0.0);
            continue;
        }
        let mut r = vec![0.0f64; lag_max + 2];
        for (lag, rl) in r.iter_mut().enumerate().take(lag_max + 2).skip(lag_min.saturating_sub(1)) {
            if lag >= frame_len {
                break;
            }
            *rl = x[..frame_len - lag]
                .iter()
                .zip(&x[lag..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / r0;
        }
        let (mut best_lag, mut best_val) = (0usize, f64::NEG_INFINITY);
        for lag in lag_min..=lag_max {
            if r[lag] > best_val {
                best_val = r[lag];
                best_lag = lag;
            }
        }
        if best_val < opts.voicing_threshold {
            f0.push(0.0);
            continue;
        }
        // Parabolic refinement around the discrete peak.
        let mut lag = best_lag as f64;
        if best_lag > lag_min && best_lag < lag_max + 1 {
            let (ym, y0, yp) = (r[best_lag - 1], r[best_lag], r[best_lag + 1]);
            let denom = ym - 2.0 * y0 + yp;
            if denom.abs() > 1e-12 {
                let delta = 0.5 * (ym - yp) / denom;
                if delta.abs() <= 1.0 {
                    lag += delta;
                }
            }
        }
        let hz = (sr / lag).clamp(opts.floor_hz, opts.ceil_hz);
        f0.push(hz);
    }
    F0Track { f0, hop_seconds }
}

/// Monotonic warp: starts at (0,0), ends at the last pair of frames, steps
/// are (1,0), (0,1), or (1,1).
#[derive(Clone, Debug)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

fn frame_dist(x: &[f32], y: &[f32]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Classic DTW over row-major frame matrices with Euclidean frame distance.
pub fn dtw_align(x: &[f32], y: &[f32], width: usize) -> Result<AlignmentPath, EvalError> {
    if width == 0 || x.len() % width != 0 || y.len() % width != 0 {
        return Err(EvalError::WidthMismatch(x.len() % width.max(1), y.len() % width.max(1)));
    }
    let (t1, t2) = (x.len() / width, y.len() / width);
    if t1 == 0 || t2 == 0 {
        return Err(EvalError::EmptySequence);
    }
    let mut acc = vec![f64::INFINITY; t1 * t2];
    for i in 0..t1 {
        let xf = &x[i * width..(i + 1) * width];
        for j in 0..t2 {
            let d = frame_dist(xf, &y[j * width..(j + 1) * width]);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut p = f64::INFINITY;
                if i > 0 {
                    p = p.min(acc[(i - 1) * t2 + j]);
                }
                if j > 0 {
                    p = p.min(acc[i * t2 + j - 1]);
                }
                if i > 0 && j > 0 {
                    p = p.min(acc[(i - 1) * t2 + j - 1]);
                }
                p
            };
            acc[i * t2 + j] = d + prev;
        }
    }
    let cost = acc[(t1 - 1) * t2 + (t2 - 1)];
    let mut pairs = vec![(t1 - 1, t2 - 1)];
    let (mut i, mut j) = (t1 - 1, t2 - 1);
    while i > 0 || j > 0 {
        let mut next = (0usize, 0usize);
        let mut best = f64::INFINITY;
        if i > 0 && j > 0 && acc[(i - 1) * t2 + j - 1] <= best {
            best = acc[(i - 1) * t2 + j - 1];
            next = (i - 1, j - 1);
        }
        if i > 0 && acc[(i - 1) * t2 + j] < best {
            best = acc[(i - 1) * t2 + j];
            next = (i - 1, j);
        }
        if j > 0 && acc[i * t2 + j - 1] < best {
            next = (i, j - 1);
        }
        pairs.push(next);
        i = next.0;
        j = next.1;
    }
    pairs.reverse();
    Ok(AlignmentPath { pairs, cost })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RmseVariant {
    /// All aligned pairs.
    Original,
    /// Pairs dropped where the reference is unvoiced or marked silent.
    Processed,
}

#[derive(Clone, Copy, Debug)]
pub struct RmseF0 {
    /// sqrt of the summed squared differences, as printed.
    pub literal: f64,
    /// sqrt of the mean squared difference.
    pub normalized: f64,
    pub pairs: usize,
}

/// F0 RMSE over index-aligned tracks. `reference_silence`, when given, must
/// match the track length and marks frames excluded in the processed
/// variant.
pub fn rmse_f0(
    converted: &F0Track,
    reference: &F0Track,
    variant: RmseVariant,
    reference_silence: Option<&[bool]>,
) -> Result<RmseF0, EvalError> {
    if converted.f0.len() != reference.f0.len() {
        return Err(EvalError::WidthMismatch(converted.f0.len(), reference.f0.len()));
    }
    if let Some(sil) = reference_silence {
        if sil.len() != reference.f0.len() {
            return Err(EvalError::WidthMismatch(sil.len(), reference.f0.len()));
        }
    }
    let mut sum = 0.0f64;
    let mut k = 0usize;
    for idx in 0..reference.f0.len() {
        if variant == RmseVariant::Processed {
            let silent = reference_silence.map(|s| s[idx]).unwrap_or(false);
            if silent || reference.f0[idx] == 0.0 {
                continue;
            }
        }
        let d = converted.f0[idx] - reference.f0[idx];
        sum += d * d;
        k += 1;
    }
    if k == 0 {
        return Err(EvalError::NoPairs);
    }
    Ok(RmseF0 {
        literal: sum.sqrt(),
        normalized: (sum / k as f64).sqrt(),
        pairs: k,
    })
}

fn dct_cepstrum(log_frame: &[f64]) -> Vec<f64> {
    let n = log_frame.len();
    (0..n)
        .map(|k| {
            log_frame
                .iter()
                .enumerate()
                .map(|(i, &x)| x * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
                .sum()
        })
        .collect()
}

/// Mel-cepstral distortion in dB, averaged along the alignment path.
/// Cepstra are DCT-II of the denormalized log-mel frames; the energy bin
/// c0 is excluded.
pub fn mel_cepstral_distortion(
    converted: &MelSpectrogram,
    reference: &MelSpectrogram,
    path: &AlignmentPath,
) -> f64 {
    let factor = 10.0 / std::f64::consts::LN_10 * (2.0f64).sqrt();
    let cep = |m: &MelSpectrogram, t: usize| -> Vec<f64> {
        let log: Vec<f64> = m.frame(t).iter().map(|&v| m.denormalize(v)).collect();
        dct_cepstrum(&log)
    };
    let mut total = 0.0;
    for &(i, j) in &path.pairs {
        let cc = cep(converted, i);
        let ct = cep(reference, j);
        let ss: f64 = cc[1..N_MELS]
            .iter()
            .zip(&ct[1..N_MELS])
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        total += factor * ss.sqrt();
    }
    total / path.pairs.len() as f64
}

#[cfg(test)]
mod tests;
