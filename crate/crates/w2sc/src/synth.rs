//! Synthetic paired corpus for desk-scale runs: a voiced "normal" signal
//! (harmonic source through a random 3-formant filter) and its "whisper"
//! twin (noise excitation through the same filter, 20 dB quieter).

use rand::Rng;

use crate::signal::Waveform;

const N_FORMANTS: usize = 3;

#[derive(Clone, Copy, Debug)]
struct Formant {
    freq_hz: f64,
    bandwidth_hz: f64,
}

/// Two-pole resonator coefficients for one formant.
fn resonator(f: Formant, sr: f64) -> (f64, f64, f64) {
    let r = (-std::f64::consts::PI * f.bandwidth_hz / sr).exp();
    let theta = 2.0 * std::f64::consts::PI * f.freq_hz / sr;
    // y[n] = g x[n] + 2 r cos(theta) y[n-1] - r^2 y[n-2]
    (1.0 - r, 2.0 * r * theta.cos(), -r * r)
}

fn filter_formants(x: &[f64], formants: &[Formant], sr: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    for &f in formants {
        let (g, a1, a2) = resonator(f, sr);
        let (mut y1, mut y2) = (0.0f64, 0.0f64);
        for v in y.iter_mut() {
            let out = g * *v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = out;
            *v = out;
        }
    }
    y
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub struct UtterancePair {
    pub normal: Waveform,
    pub whisper: Waveform,
}

/// One paired utterance. The F0 contour drifts smoothly inside 100-300 Hz;
/// the whisper twin shares the formant filter and sits 20 dB below the
/// normal twin in RMS energy.
pub fn synth_pair<R: Rng>(rng: &mut R, duration_s: f64, sample_rate: u32) -> UtterancePair {
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;

    let formants: Vec<Formant> = {
        let bands = [(300.0, 900.0), (900.0, 2200.0), (2200.0, 3500.0)];
        (0..N_FORMANTS)
            .map(|i| Formant {
                freq_hz: rng.gen_range(bands[i].0..bands[i].1),
                bandwidth_hz: rng.gen_range(60.0..150.0),
            })
            .collect()
    };

    // F0 contour: sinusoidal drift around a random center, kept in 100-300.
    let center = rng.gen_range(130.0f64..250.0);
    let depth = rng.gen_range(10.0f64..30.0);
    let drift_hz = rng.gen_range(0.5f64..2.0);
    let phase0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let f0_at = |t: f64| -> f64 {
        (center + depth * (std::f64::consts::TAU * drift_hz * t + phase0).sin()).clamp(100.0, 300.0)
    };

    // Harmonic source: impulse-ish pulse train via summed harmonics.
    let mut phase = 0.0f64;
    let mut source = Vec::with_capacity(n);
    for i in 0..n {
        let f0 = f0_at(i as f64 / sr);
        phase += std::f64::consts::TAU * f0 / sr;
        let n_harm = ((sr / 2.0 / f0).floor() as usize).min(40).max(1);
        let mut s = 0.0;
        for h in 1..=n_harm {
            s += (phase * h as f64).sin() / h as f64;
        }
        source.push(s);
    }
    let normal_raw = filter_formants(&source, &formants, sr);

    // Turbulent excitation broadens the formants; without the extra
    // bandwidth the resonators ring periodically enough that a pitch
    // tracker calls the whisper voiced.
    let whisper_formants: Vec<Formant> = formants
        .iter()
        .map(|f| Formant {
            freq_hz: f.freq_hz,
            bandwidth_hz: f.bandwidth_hz * 5.0,
        })
        .collect();
    let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
    let whisper_raw = filter_formants(&noise, &whisper_formants, sr);

    let normal_rms = 0.1f64;
    let g_n = normal_rms / rms(&normal_raw).max(1e-12);
    // 20 dB down in energy.
    let g_w = (normal_rms * 10f64.powf(-20.0 / 20.0)) / rms(&whisper_raw).max(1e-12);

    let to_wave = |x: &[f64], g: f64| Waveform {
        samples: x.iter().map(|&v| (v * g) as f32).collect(),
        sample_rate,
    };
    UtterancePair {
        normal: to_wave(&normal_raw, g_n),
        whisper: to_wave(&whisper_raw, g_w),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::evaluation::{estimate_f0, F0Options};

    #[test]
    fn normal_is_voiced_and_whisper_is_not() {
        let opts = F0Options::default();
        let mut whisper_total = 0.0;
        for seed in 0..8u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = synth_pair(&mut rng, 1.0, 16_000);
            let normal = estimate_f0(&pair.normal, &opts);
            let whisper = estimate_f0(&pair.whisper, &opts);
            assert!(normal.voiced_fraction() > 0.8, "seed {seed}: {}", normal.voiced_fraction());
            assert!(whisper.voiced_fraction() < 0.2, "seed {seed}: {}", whisper.voiced_fraction());
            whisper_total += whisper.voiced_fraction();
            // The F0 contour stays inside the synthesis range.
            for &f in normal.f0.iter().filter(|&&f| f > 0.0) {
                assert!((95.0..=305.0).contains(&f), "f0 {f}");
            }
        }
        assert!(whisper_total / 8.0 < 0.1, "mean {}", whisper_total / 8.0);
    }

    #[test]
    fn whisper_sits_twenty_db_below_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = synth_pair(&mut rng, 0.8, 16_000);
        let gap = 20.0 * (pair.normal.rms() / pair.whisper.rms()).log10();
        assert!((gap - 20.0).abs() < 1e-6, "gap {gap} dB");
        assert!((pair.normal.rms() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn durations_and_rates_are_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = synth_pair(&mut rng, 1.25, 16_000);
        assert_eq!(pair.normal.samples.len(), 20_000);
        assert_eq!(pair.whisper.samples.len(), 20_000);
        assert_eq!(pair.normal.sample_rate, 16_000);
        assert!(pair.normal.samples.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_reproduces_the_pair() {
        let a = synth_pair(&mut ChaCha8Rng::seed_from_u64(4), 0.5, 16_000);
        let b = synth_pair(&mut ChaCha8Rng::seed_from_u64(4), 0.5, 16_000);
        assert_eq!(a.normal.samples, b.normal.samples);
        assert_eq!(a.whisper.samples, b.whisper.samples);
    }
}
