//! 12-frame segmentation, corpus handling, and batch sampling.

use rand::Rng;

use crate::error::TrainError;
use crate::networks::{SEGMENT_BANDS, SEGMENT_FRAMES};
use crate::signal::{MelSpectrogram, N_MELS};
use crate::tensorcore::TensorData;

/// A 128x12 mel slice in (band, frame) layout, the unit of training and
/// conversion.
#[derive(Clone, Debug)]
pub struct Segment {
    pub values: Vec<f32>,
    /// (utterance index, start frame)
    pub origin: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentMode {
    /// Non-overlapping windows of 12; a remainder shorter than 12 is dropped.
    Train,
    /// The final window is padded by reflecting the last frames; the caller
    /// trims reassembled output back to the original frame count.
    Convert,
}

fn window_to_segment(m: &MelSpectrogram, utterance: usize, start: usize, t_total: usize) -> Segment {
    let mut values = vec![0.0f32; SEGMENT_BANDS * SEGMENT_FRAMES];
    for fr in 0..SEGMENT_FRAMES {
        let mut idx = start + fr;
        if idx >= t_total {
            // Reflect about the last frame.
            let over = idx - (t_total - 1);
            idx = if t_total >= 2 {
                let m2 = 2 * (t_total - 1);
                let k = (t_total - 1 + over) % m2;
                if k < t_total {
                    k
                } else {
                    m2 - k
                }
            } else {
                0
            };
        }
        let frame = m.frame(idx);
        for band in 0..SEGMENT_BANDS {
            values[band * SEGMENT_FRAMES + fr] = frame[band];
        }
    }
    Segment {
        values,
        origin: (utterance, start),
    }
}

/// Cut an utterance into 128x12 segments.
pub fn segment_utterance(
    m: &MelSpectrogram,
    utterance: usize,
    mode: SegmentMode,
) -> Result<Vec<Segment>, TrainError> {
    let t = m.n_frames();
    if t == 0 {
        return Err(TrainError::EmptyInput);
    }
    let count = match mode {
        SegmentMode::Train => t / SEGMENT_FRAMES,
        SegmentMode::Convert => t.div_ceil(SEGMENT_FRAMES),
    };
    Ok((0..count)
        .map(|i| window_to_segment(m, utterance, i * SEGMENT_FRAMES, t))
        .collect())
}

/// Reassemble converted segments and trim back to the original frame count.
pub fn reassemble_segments(segments: &[Segment], original_t: usize, stats: (f32, f32)) -> MelSpectrogram {
    let mut frames = vec![0.0f32; original_t * N_MELS];
    for (i, seg) in segments.iter().enumerate() {
        for fr in 0..SEGMENT_FRAMES {
            let t = i * SEGMENT_FRAMES + fr;
            if t >= original_t {
                break;
            }
            for band in 0..SEGMENT_BANDS {
                frames[t * N_MELS + band] = seg.values[band * SEGMENT_FRAMES + fr];
            }
        }
    }
    MelSpectrogram {
        frames,
        norm_stats: stats,
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub name: String,
    pub mel: MelSpectrogram,
}

/// Feature corpus: whisper and normal utterances with per-domain
/// normalization stats. Pairing by file name is recorded through names but
/// never consumed by training.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub whisper: Vec<Utterance>,
    pub normal: Vec<Utterance>,
}

/// Pre-cut training segments for both domains.
pub struct SegmentPool {
    pub whisper: Vec<Segment>,
    pub normal: Vec<Segment>,
}

impl SegmentPool {
    pub fn build(corpus: &Corpus) -> Result<Self, TrainError> {
        let cut = |utts: &[Utterance]| -> Result<Vec<Segment>, TrainError> {
            let mut out = Vec::new();
            for (i, u) in utts.iter().enumerate() {
                out.extend(segment_utterance(&u.mel, i, SegmentMode::Train)?);
            }
            Ok(out)
        };
        let pool = SegmentPool {
            whisper: cut(&corpus.whisper)?,
            normal: cut(&corpus.normal)?,
        };
        if pool.whisper.is_empty() || pool.normal.is_empty() {
            return Err(TrainError::EmptyInput);
        }
        Ok(pool)
    }
}

/// One training batch: stacked segment tensors plus the (a1, a2) pair
/// indices into the whisper half.
pub struct Batch {
    pub whisper: TensorData<f32>,
    pub normal: TensorData<f32>,
    pub pairs: Vec<(usize, usize)>,
}

/// Uniform over all segments of each domain independently; pairs are two
/// distinct positions within the whisper half.
pub fn sample_batch<R: Rng>(pool: &SegmentPool, batch_size: usize, rng: &mut R) -> Batch {
    let pick = |segs: &[Segment], rng: &mut R| -> TensorData<f32> {
        let chosen: Vec<Vec<f32>> = (0..batch_size)
            .map(|_| segs[rng.gen_range(0..segs.len())].values.clone())
            .collect();
        crate::networks::segments_to_tensor(&chosen)
    };
    let whisper = pick(&pool.whisper, rng);
    let normal = pick(&pool.normal, rng);
    let pairs = (0..batch_size)
        .map(|_| {
            let a = rng.gen_range(0..batch_size);
            let mut b = rng.gen_range(0..batch_size - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect();
    Batch {
        whisper,
        normal,
        pairs,
    }
}
