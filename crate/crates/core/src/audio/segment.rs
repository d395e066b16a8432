use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Waveform, EVAL_SEGMENT, EVAL_SEGMENTS, TRAIN_SEGMENT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentMode {
    /// One random 2.0 s crop.
    Train,
    /// Ten evenly spaced 4.0 s segments.
    Eval,
}

/// Tiles `samples` until at least `len` samples are available.
fn wrap_to(samples: &[f64], len: usize) -> Vec<f64> {
    samples.iter().copied().cycle().take(len.max(samples.len())).collect()
}

/// Start of eval segment `i` for `slack` spare samples: `i·slack/9` rounded,
/// with exact halves rounded toward zero.
fn eval_start(i: usize, slack: usize) -> usize {
    let q = i * slack;
    let parts = EVAL_SEGMENTS - 1;
    (2 * q + parts - 1) / (2 * parts)
}

/// Cuts training or evaluation segments. Utterances shorter than a segment
/// are tiled to the required length first.
pub fn sample_segments(wave: &Waveform, mode: SegmentMode, seed: u64) -> Vec<Waveform> {
    assert!(!wave.is_empty(), "cannot segment an empty waveform");
    let seg_len = match mode {
        SegmentMode::Train => TRAIN_SEGMENT,
        SegmentMode::Eval => EVAL_SEGMENT,
    };
    let source = wrap_to(&wave.samples, seg_len);
    let slack = source.len() - seg_len;
    let cut =
        |start: usize| Waveform { samples: source[start..start + seg_len].to_vec(), sample_rate: wave.sample_rate };
    match mode {
        SegmentMode::Train => {
            let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..=slack);
            vec![cut(start)]
        }
        SegmentMode::Eval => (0..EVAL_SEGMENTS).map(|i| cut(eval_start(i, slack))).collect(),
    }
}

/// Eval segment starts for an utterance of `len` samples.
#[cfg(test)]
fn eval_starts(len: usize) -> Vec<usize> {
    let slack = len.saturating_sub(EVAL_SEGMENT);
    (0..EVAL_SEGMENTS).map(|i| eval_start(i, slack)).collect()
}
