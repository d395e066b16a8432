//! PCM ingestion, log-Mel features and segment sampling.

mod corpus;
mod mel;
mod segment;
mod wav;

pub use corpus::{Corpus, Speaker};
pub use mel::{log_mel, normalize_per_freq, LogMelExtractor, MelFilterbank, MelSpectrogram};
pub use segment::{sample_segments, SegmentMode};
pub use wav::{load_wav, write_wav, Waveform};

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window.
pub const FRAME_WIDTH: usize = 400;
/// 10 ms hop.
pub const FRAME_HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 64;
/// 2.0 s training crop.
pub const TRAIN_SEGMENT: usize = 32_000;
/// 4.0 s evaluation segment.
pub const EVAL_SEGMENT: usize = 64_000;
pub const EVAL_SEGMENTS: usize = 10;

/// Number of frames `log_mel` produces for `len` samples.
pub fn frame_count(len: usize) -> usize {
    if len < FRAME_WIDTH {
        0
    } else {
        (len - FRAME_WIDTH) / FRAME_HOP + 1
    }
}
