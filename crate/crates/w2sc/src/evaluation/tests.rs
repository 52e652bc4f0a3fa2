use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::signal::{hann_window, mel_spectrogram, MelFilterbank, Waveform};

fn sine(freq: f64, secs: f64, sr: u32) -> Waveform {
    let n = (secs * sr as f64) as usize;
    let samples = (0..n)
        .map(|i| (0.4 * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
        .collect();
    Waveform::new(samples, sr)
}

#[test]
fn f0_tracks_a_pure_tone() {
    let wav = sine(200.0, 0.5, 16_000);
    let track = estimate_f0(&wav, &F0Options::default());
    assert!(!track.f0.is_empty());
    let close = track
        .f0
        .iter()
        .filter(|&&f| (f - 200.0).abs() <= 2.0)
        .count();
    assert!(
        close as f64 >= 0.95 * track.f0.len() as f64,
        "{close}/{} frames near 200 Hz",
        track.f0.len()
    );
    assert!((track.hop_seconds - 0.010).abs() < 1e-9);
}

#[test]
fn f0_marks_noise_and_silence_unvoiced() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Waveform::new((0..8000).map(|_| rng.gen_range(-0.3..0.3)).collect(), 16_000);
    let track = estimate_f0(&noise, &F0Options::default());
    assert!(track.voiced_fraction() <= 0.10, "{}", track.voiced_fraction());

    let silence = Waveform::new(vec![0.0; 8000], 16_000);
    let track = estimate_f0(&silence, &F0Options::default());
    assert_eq!(track.voiced_fraction(), 0.0);
    assert!(track.f0.iter().all(|&f| f == 0.0));
}

/// Exhaustive minimum over all monotone step-(1,0)/(0,1)/(1,1) paths.
fn dtw_brute(x: &[f32], y: &[f32], width: usize) -> f64 {
    fn go(x: &[f32], y: &[f32], width: usize, i: usize, j: usize) -> f64 {
        let d: f64 = x[i * width..(i + 1) * width]
            .iter()
            .zip(&y[j * width..(j + 1) * width])
            .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
            .sum::<f64>()
            .sqrt();
        if i == 0 && j == 0 {
            return d;
        }
        let mut best = f64::INFINITY;
        if i > 0 {
            best = best.min(go(x, y, width, i - 1, j));
        }
        if j > 0 {
            best = best.min(go(x, y, width, i, j - 1));
        }
        if i > 0 && j > 0 {
            best = best.min(go(x, y, width, i - 1, j - 1));
        }
        d + best
    }
    go(x, y, width, x.len() / width - 1, y.len() / width - 1)
}

#[test]
fn dtw_matches_brute_force_on_small_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (t1, t2) in [(1, 1), (2, 3), (4, 4), (5, 3), (6, 6)] {
        let width = 2;
        let x: Vec<f32> = (0..t1 * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..t2 * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let path = dtw_align(&x, &y, width).unwrap();
        let oracle = dtw_brute(&x, &y, width);
        assert!((path.cost - oracle).abs() < 1e-9, "{} vs {oracle}", path.cost);
        // Endpoint and monotone step structure.
        assert_eq!(*path.pairs.first().unwrap(), (0, 0));
        assert_eq!(*path.pairs.last().unwrap(), (t1 - 1, t2 - 1));
        for w in path.pairs.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            assert!(di <= 1 && dj <= 1 && di + dj >= 1);
        }
    }
}

#[test]
fn dtw_absorbs_duplicated_frames_for_free() {
    let width = 3;
    let x: Vec<f32> = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    // Same sequence with the middle frame tripled.
    let mut y = x[..width * 2].to_vec();
    y.extend_from_slice(&x[width..width * 2]);
    y.extend_from_slice(&x[width..width * 2]);
    y.extend_from_slice(&x[width * 2..]);
    let path = dtw_align(&x, &y, width).unwrap();
    assert_eq!(path.cost, 0.0);
}

#[test]
fn dtw_rejects_bad_inputs() {
    assert!(matches!(
        dtw_align(&[1.0, 2.0, 3.0], &[1.0, 2.0], 2),
        Err(EvalError::WidthMismatch(..))
    ));
    assert!(matches!(
        dtw_align(&[], &[1.0, 2.0], 2),
        Err(EvalError::EmptySequence)
    ));
}

#[test]
fn rmse_f0_literal_and_normalized_forms() {
    let hop = 0.01;
    let conv = F0Track {
        f0: vec![101.0, 121.0, 141.0, 161.0],
        hop_seconds: hop,
    };
    let refr = F0Track {
        f0: vec![100.0, 120.0, 140.0, 160.0],
        hop_seconds: hop,
    };
    // Four pairs each off by 1 Hz: literal sqrt(4) = 2, normalized 1.
    let r = rmse_f0(&conv, &refr, RmseVariant::Original, None).unwrap();
    assert_eq!(r.pairs, 4);
    assert!((r.literal - 2.0).abs() < 1e-12);
    assert!((r.normalized - 1.0).abs() < 1e-12);

    // A single pair off by 3: both forms give 3.
    let conv = F0Track { f0: vec![103.0], hop_seconds: hop };
    let refr = F0Track { f0: vec![100.0], hop_seconds: hop };
    let r = rmse_f0(&conv, &refr, RmseVariant::Original, None).unwrap();
    assert!((r.literal - 3.0).abs() < 1e-12);
    assert!((r.normalized - 3.0).abs() < 1e-12);
}

#[test]
fn rmse_f0_processed_drops_silent_and_unvoiced_frames() {
    let hop = 0.01;
    let conv = F0Track {
        f0: vec![110.0, 50.0, 140.0, 170.0],
        hop_seconds: hop,
    };
    let refr = F0Track {
        f0: vec![100.0, 0.0, 140.0, 160.0],
        hop_seconds: hop,
    };
    let silence = vec![false, false, false, true];
    let all = rmse_f0(&conv, &refr, RmseVariant::Original, Some(&silence)).unwrap();
    assert_eq!(all.pairs, 4);
    // Processed keeps only frames 0 and 2: unvoiced reference and the
    // silent frame drop out.
    let proc = rmse_f0(&conv, &refr, RmseVariant::Processed, Some(&silence)).unwrap();
    assert_eq!(proc.pairs, 2);
    assert!((proc.literal - 10.0).abs() < 1e-12);
    assert!((proc.normalized - (100.0f64 / 2.0).sqrt()).abs() < 1e-12);

    let unvoiced = F0Track { f0: vec![0.0; 4], hop_seconds: hop };
    assert!(matches!(
        rmse_f0(&conv, &unvoiced, RmseVariant::Processed, None),
        Err(EvalError::NoPairs)
    ));
    assert!(matches!(
        rmse_f0(&conv, &refr, RmseVariant::Original, Some(&[false])),
        Err(EvalError::WidthMismatch(..))
    ));
}

fn test_mel(seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wav = Waveform::new((0..4000).map(|_| rng.gen_range(-0.3..0.3)).collect(), 16_000);
    let fb = MelFilterbank::new(16_000, 1024, 0.0, 8000.0);
    mel_spectrogram(&wav, &fb, 1024, 256, &hann_window(1024), None).unwrap()
}

#[test]
fn mcd_is_zero_for_identical_features() {
    let m = test_mel(13);
    let t = m.n_frames();
    let path = AlignmentPath {
        pairs: (0..t).map(|i| (i, i)).collect(),
        cost: 0.0,
    };
    assert!(mel_cepstral_distortion(&m, &m, &path).abs() < 1e-9);
}

#[test]
fn mcd_ignores_overall_gain() {
    // A constant log-domain offset only moves the excluded c0 coefficient.
    let m = test_mel(14);
    let raw: Vec<f64> = m
        .frames
        .iter()
        .map(|&v| m.denormalize(v) + 1.0)
        .collect();
    let lo = m.norm_stats.0 + 1.0;
    let hi = m.norm_stats.1 + 1.0;
    let shifted = crate::signal::normalize_log_mel(&raw, (lo, hi));
    let t = m.n_frames();
    let path = AlignmentPath {
        pairs: (0..t).map(|i| (i, i)).collect(),
        cost: 0.0,
    };
    let d = mel_cepstral_distortion(&shifted, &m, &path);
    assert!(d.abs() < 1e-4, "mcd {d}");
}

#[test]
fn mcd_scales_with_log_spectral_distance() {
    // Doubling a log-domain perturbation doubles the distortion.
    let m = test_mel(15);
    let t = m.n_frames();
    let perturb = |scale: f64| -> MelSpectrogram {
        let raw: Vec<f64> = m
            .frames
            .iter()
            .enumerate()
            .map(|(i, &v)| m.denormalize(v) + scale * ((i % N_MELS) as f64 / N_MELS as f64 - 0.5))
            .collect();
        let (lo, hi) = (m.norm_stats.0 - scale as f32, m.norm_stats.1 + scale as f32);
        crate::signal::normalize_log_mel(&raw, (lo, hi))
    };
    let path = AlignmentPath {
        pairs: (0..t).map(|i| (i, i)).collect(),
        cost: 0.0,
    };
    let base = perturb(0.0);
    let d1 = mel_cepstral_distortion(&perturb(0.5), &base, &path);
    let d2 = mel_cepstral_distortion(&perturb(1.0), &base, &path);
    assert!(d1 > 0.1);
    assert!((d2 / d1 - 2.0).abs() < 0.02, "ratio {}", d2 / d1);
}
