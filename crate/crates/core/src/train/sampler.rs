use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::Corpus;
use crate::error::{Error, Result};

/// One cropped utterance in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub speaker: usize,
    pub utterance: usize,
    /// Seed of the random training crop.
    pub crop_seed: u64,
}

/// `N` speakers × `M` utterances, stored speaker-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub per_speaker: usize,
}

impl Batch {
    pub fn speakers(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().step_by(self.per_speaker).map(|i| i.speaker)
    }
}

/// Seeded batch plans. A pass shuffles the speakers and slices them into
/// batches of `N`; a short final batch is topped up with other speakers.
/// An epoch is one pass unless [`BatchSampler::with_passes`] says otherwise.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    counts: Vec<usize>,
    n: usize,
    m: usize,
    passes: usize,
    seed: u64,
}

impl BatchSampler {
    /// `counts[s]` is the number of utterances of speaker `s`.
    pub fn new(counts: Vec<usize>, n: usize, m: usize, seed: u64) -> Result<Self> {
        if n < 2 || m == 0 {
            return Err(Error::Parameter(format!("need N >= 2 and M >= 1, got N={n}, M={m}")));
        }
        if counts.len() < n {
            return Err(Error::Data(format!("{} speakers available, batches need {n}", counts.len())));
        }
        if let Some(s) = counts.iter().position(|&c| c < m) {
            return Err(Error::Data(format!("speaker {s} has {} utterances, batches need {m}", counts[s])));
        }
        Ok(Self { counts, n, m, passes: 1, seed })
    }

    /// Full speaker passes per epoch (at least 1).
    pub fn with_passes(mut self, passes: usize) -> Self {
        self.passes = passes.max(1);
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.passes * self.counts.len().div_ceil(self.n)
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        let mut batches = Vec::with_capacity(self.steps_per_epoch());
        for _ in 0..self.passes {
            order.shuffle(&mut rng);
            self.pass(&order, &mut rng, &mut batches);
        }
        batches
    }

    fn pass(&self, order: &[usize], rng: &mut ChaCha8Rng, batches: &mut Vec<Batch>) {
        for chunk in order.chunks(self.n) {
            let mut speakers = chunk.to_vec();
            while speakers.len() < self.n {
                let s = rng.random_range(0..self.counts.len());
                if !speakers.contains(&s) {
                    speakers.push(s);
                }
            }
            let mut items = Vec::with_capacity(self.n * self.m);
            for s in speakers {
                for u in index::sample(rng, self.counts[s], self.m).into_iter() {
                    items.push(BatchItem { speaker: s, utterance: u, crop_seed: rng.random() });
                }
            }
            batches.push(Batch { items, per_speaker: self.m });
        }
    }
}

pub fn batch_sampler(corpus: &Corpus, n: usize, m: usize, seed: u64) -> Result<BatchSampler> {
    BatchSampler::new(corpus.speakers.iter().map(|s| s.utterances.len()).collect(), n, m, seed)
}
