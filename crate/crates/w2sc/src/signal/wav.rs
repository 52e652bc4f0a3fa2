//! 16-bit PCM RIFF reading and writing, with linear resampling.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::SignalError;

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        (e / self.samples.len() as f64).sqrt()
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SignalError {
    SignalError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> SignalError {
    SignalError::MalformedWav {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Read a 16-bit PCM WAV; the first channel is taken for multi-channel
/// files. If `target_rate` differs from the file rate the signal is
/// resampled by linear interpolation.
pub fn load_wav(path: &Path, target_rate: Option<u32>) -> Result<Waveform, SignalError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad(path, "missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad(path, "fmt chunk too short"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => {
                if pos + 8 + size > bytes.len() {
                    return Err(bad(path, "truncated data chunk"));
                }
                data = Some(body);
            }
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| bad(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| bad(path, "missing data chunk"))?;
    if format != 1 || bits != 16 {
        return Err(SignalError::UnsupportedWav {
            path: path.display().to_string(),
            reason: format!("need 16-bit PCM, got format {format} with {bits} bits"),
        });
    }
    if channels == 0 || rate == 0 {
        return Err(bad(path, "zero channels or sample rate"));
    }
    let stride = 2 * channels as usize;
    let n = data.len() / stride;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let v = i16::from_le_bytes(data[i * stride..i * stride + 2].try_into().unwrap());
        samples.push(v as f32 / 32768.0);
    }
    let mut wav = Waveform::new(samples, rate);
    if let Some(target) = target_rate {
        if target != rate {
            wav = resample(&wav, target);
        }
    }
    Ok(wav)
}

/// Write a mono 16-bit PCM WAV. Samples are clamped to `[-1, 1]`.
pub fn save_wav(path: &Path, wav: &Waveform) -> Result<(), SignalError> {
    let n = wav.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wav.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wav.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wav.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .map_err(|e| io_err(path, e))?
        .write_all(&out)
        .map_err(|e| io_err(path, e))
}

/// Linear-interpolation resampler; output length is
/// `round(len * target / source)`.
pub fn resample(wav: &Waveform, target_rate: u32) -> Waveform {
    if wav.sample_rate == target_rate || wav.samples.is_empty() {
        return Waveform::new(wav.samples.clone(), target_rate);
    }
    let ratio = target_rate as f64 / wav.sample_rate as f64;
    let out_len = ((wav.samples.len() as f64) * ratio).round() as usize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let src = i as f64 / ratio;
        let lo = src.floor() as usize;
        let frac = (src - lo as f64) as f32;
        let a = *wav.samples.get(lo).unwrap_or(&0.0);
        let b = *wav.samples.get(lo + 1).unwrap_or(&a);
        out.push(a + (b - a) * frac);
    }
    Waveform::new(out, target_rate)
}
