pub mod checkpoint;
pub mod segment;
pub mod steps;

pub use checkpoint::{crc32, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use segment::{
    reassemble_segments, sample_batch, segment_utterance, Batch, Corpus, Segment, SegmentMode,
    SegmentPool, Utterance,
};
pub use steps::{convert_utterance, train_step, StepReport, TrainState};
