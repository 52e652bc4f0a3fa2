//! Randomized invariants over the signal, tensor, and evaluation layers.

use proptest::prelude::*;

use w2sc::config::RunConfig;
use w2sc::evaluation::{dtw_align, rmse_f0, F0Track, RmseVariant};
use w2sc::signal::{
    griffin_lim, hann_window, istft, load_mel, normalize_log_mel, save_mel, stft, Waveform,
    N_MELS,
};
use w2sc::tensorcore::{Padding, Tape, TensorData};
use w2sc::training::{crc32, reassemble_segments, segment_utterance, SegmentMode};

fn wave(samples: Vec<f32>) -> Waveform {
    Waveform::new(samples, 16_000)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stft_istft_recovers_the_interior(
        seed in 0u64..1000,
        len in 4096usize..12000,
    ) {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let samples: Vec<f32> = (0..len)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) as f32
            })
            .collect();
        let wav = wave(samples);
        let w = hann_window(1024);
        let spec = stft(&wav, 1024, 256, &w).unwrap();
        let back = istft(&spec, len, 16_000);
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for i in 1024..len - 1024 {
            let d = (back.samples[i] - wav.samples[i]) as f64;
            err += d * d;
            norm += (wav.samples[i] as f64).powi(2);
        }
        prop_assert!((err / norm).sqrt() < 1e-3);
    }

    #[test]
    fn griffin_lim_error_never_increases(
        seed in 0u64..1000,
        frames in 10usize..20,
    ) {
        // Arbitrary nonnegative magnitudes, not necessarily consistent.
        // The signal must cover several analysis windows; shorter ones
        // break the projection structure the monotonicity rests on.
        let n_fft = 64usize;
        let n_bins = 1 + n_fft / 2;
        let mut state = seed.wrapping_mul(0x2545f4914f6cdd1d) | 1;
        let mag: Vec<f64> = (0..frames * n_bins)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        let w = hann_window(n_fft);
        let result = griffin_lim(&mag, frames, 15, n_fft, 16, &w, 16_000);
        for pair in result.convergence.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn mel_files_roundtrip(frames in proptest::collection::vec(-1.0f32..1.0, N_MELS..4 * N_MELS)) {
        let t = frames.len() / N_MELS;
        let raw: Vec<f64> = frames[..t * N_MELS].iter().map(|&v| v as f64).collect();
        let m = normalize_log_mel(&raw, (-1.0, 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.mel");
        save_mel(&path, &m).unwrap();
        let back = load_mel(&path).unwrap();
        prop_assert_eq!(back.frames, m.frames);
        prop_assert_eq!(back.norm_stats, m.norm_stats);
    }

    #[test]
    fn conv_transpose_is_the_adjoint_operator(
        seed in 0u64..500,
        c_in in 1usize..3,
        c_out in 1usize..3,
        h in 4usize..7,
        w in 4usize..7,
        sh in 1usize..3,
        sw in 1usize..3,
    ) {
        // <conv(x), y> == <x, conv_transpose(y)> for every stride.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(TensorData::new(
            vec![1, c_in, h, w],
            (0..c_in * h * w).map(|_| next()).collect(),
        ));
        let kw: Vec<f64> = (0..c_out * c_in * 9).map(|_| next()).collect();
        let w_conv = tape.constant(TensorData::new(vec![c_out, c_in, 3, 3], kw.clone()));
        let y = tape.conv2d(x, w_conv, (sh, sw), Padding::Same).unwrap();
        let y_shape = tape.shape(y);
        let g = tape.constant(TensorData::new(
            y_shape.clone(),
            (0..y_shape.iter().product::<usize>()).map(|_| next()).collect(),
        ));
        // Transposed weights live in (c_in, c_out, kh, kw) layout, which is
        // byte-identical to the forward buffer reinterpreted.
        let w_t = tape.constant(TensorData::new(vec![c_out, c_in, 3, 3], kw));
        let xt = tape.conv2d_transpose(g, w_t, (sh, sw)).unwrap();
        let lhs = tape.value_clone(tape.sum_all(tape.mul(y, g)));
        let gx = tape.value_clone(xt);
        let x_val = tape.value_clone(x);
        if gx.shape == x_val.shape {
            let rhs: f64 = gx.data.iter().zip(&x_val.data).map(|(&a, &b)| a * b).sum();
            prop_assert!((lhs.data[0] - rhs).abs() < 1e-9 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn dtw_is_symmetric_and_bounded_by_the_diagonal(
        x in proptest::collection::vec(-1.0f32..1.0, 2..24),
        y in proptest::collection::vec(-1.0f32..1.0, 2..24),
    ) {
        let width = 2;
        let x = &x[..(x.len() / width) * width];
        let y = &y[..(y.len() / width) * width];
        let fwd = dtw_align(x, y, width).unwrap();
        let bwd = dtw_align(y, x, width).unwrap();
        prop_assert!((fwd.cost - bwd.cost).abs() < 1e-9);
        prop_assert!(fwd.cost >= -1e-12);
        if x.len() == y.len() {
            // The identity alignment is one admissible path.
            let diag: f64 = (0..x.len() / width)
                .map(|i| {
                    x[i * width..(i + 1) * width]
                        .iter()
                        .zip(&y[i * width..(i + 1) * width])
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            prop_assert!(fwd.cost <= diag + 1e-9);
        }
        let self_path = dtw_align(x, x, width).unwrap();
        prop_assert!(self_path.cost.abs() < 1e-12);
    }

    #[test]
    fn rmse_forms_are_consistent(
        pairs in proptest::collection::vec((0.0f64..400.0, 0.0f64..400.0), 1..40),
        mask in proptest::collection::vec(any::<bool>(), 40),
    ) {
        let conv = F0Track { f0: pairs.iter().map(|p| p.0).collect(), hop_seconds: 0.01 };
        let refr = F0Track { f0: pairs.iter().map(|p| p.1).collect(), hop_seconds: 0.01 };
        let silence = &mask[..pairs.len()];
        let orig = rmse_f0(&conv, &refr, RmseVariant::Original, Some(silence)).unwrap();
        // literal = normalized * sqrt(k), so literal >= normalized always.
        prop_assert!(orig.literal >= orig.normalized - 1e-12);
        prop_assert!(
            (orig.literal - orig.normalized * (orig.pairs as f64).sqrt()).abs() < 1e-9
        );
        if let Ok(proc) = rmse_f0(&conv, &refr, RmseVariant::Processed, Some(silence)) {
            prop_assert!(proc.pairs <= orig.pairs);
            // Dropping pairs can only shrink the summed error.
            prop_assert!(proc.literal <= orig.literal + 1e-12);
        }
    }

    #[test]
    fn segmentation_reassembly_roundtrips(
        t in 1usize..40,
        seed in 0u64..1000,
    ) {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let raw: Vec<f64> = (0..t * N_MELS)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect();
        let m = normalize_log_mel(&raw, (-1.0, 1.0));
        let segs = segment_utterance(&m, 0, SegmentMode::Convert).unwrap();
        prop_assert_eq!(segs.len(), t.div_ceil(12));
        let back = reassemble_segments(&segs, t, m.norm_stats);
        prop_assert_eq!(back.frames, m.frames);
    }

    #[test]
    fn crc32_detects_single_bit_flips(
        data in proptest::collection::vec(any::<u8>(), 1..200),
        flip in any::<usize>(),
    ) {
        let base = crc32(&data);
        let mut corrupted = data.clone();
        let byte = flip % data.len();
        corrupted[byte] ^= 1 << (flip % 8);
        prop_assert_ne!(base, crc32(&corrupted));
    }

    #[test]
    fn config_numeric_echo_roundtrips(
        batch in 2usize..64,
        lr in 1e-6f64..1e-2,
        literal in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.train_batch_size = batch;
        cfg.train_lr_g = lr;
        cfg.losses_eq1_literal = literal;
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(parsed.to_text(), cfg.to_text());
        prop_assert_eq!(parsed.train_lr_g, lr);
    }
}

#[test]
fn crc32_matches_the_reference_vector() {
    // Standard CRC-32 (IEEE 802.3) check value.
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    assert_eq!(crc32(b""), 0);
}
