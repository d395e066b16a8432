//! Training: losses, Adam, learning-rate and temperature schedules, batch
//! construction and the epoch loop.

mod adam;
mod loss;
mod sampler;

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, log_mel, normalize_per_freq, sample_segments, Corpus, SegmentMode, Waveform, N_MELS};
use crate::error::{Error, Result};
use crate::model::{Linear, Model};
use crate::tensor::{BatchNormMode, Tape, Tensor};

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use loss::{
    angular_prototypical_loss, combined_loss, cross_entropy, l2_normalize_rows, scale_shift, select_member, ApParams,
    LossVars, MIN_AP_SCALE,
};
pub use sampler::{batch_sampler, Batch, BatchItem, BatchSampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    /// Speakers per batch.
    pub batch_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Speaker passes per epoch.
    pub speaker_passes: usize,
    pub epochs: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_decay: 0.75,
            lr_decay_every: 15,
            weight_decay: 5e-5,
            batch_speakers: 4,
            utterances_per_speaker: 2,
            speaker_passes: 1,
            epochs: 20,
            tau_start: 31.0,
            tau_end: 1.0,
            tau_epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr0, self.lr_decay, self.tau_start, self.tau_end];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("rates and temperatures must be positive".into()));
        }
        if self.batch_speakers < 2 {
            return Err(Error::Config("batch_speakers must be at least 2".into()));
        }
        if self.utterances_per_speaker != 2 {
            return Err(Error::Config("utterances_per_speaker must be 2".into()));
        }
        if self.lr_decay_every == 0 || self.tau_epochs == 0 || self.speaker_passes == 0 {
            return Err(Error::Config("schedule periods must be positive".into()));
        }
        Ok(())
    }

    /// Linear from `tau_start` to `tau_end` over `tau_epochs`, then constant.
    pub fn temperature(&self, epoch: i64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::Parameter(format!("negative epoch {epoch}")));
        }
        let e = (epoch as f64).min(self.tau_epochs as f64);
        Ok(self.tau_start - (self.tau_start - self.tau_end) * e / self.tau_epochs as f64)
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// `31 − 3e` for the first ten epochs, 1 afterwards.
pub fn temperature_schedule(epoch: i64) -> Result<f64> {
    TrainConfig::default().temperature(epoch)
}

/// `lr0 · lr_decay^⌊epoch / lr_decay_every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.learning_rate(epoch)
}

/// Training audio held in memory, indexed `[speaker][utterance]`.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub speaker_ids: Vec<String>,
    pub waves: Vec<Vec<Waveform>>,
}

impl TrainData {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let mut waves = Vec::with_capacity(corpus.speakers.len());
        for spk in &corpus.speakers {
            waves.push(spk.utterances.iter().map(|u| load_wav(corpus.resolve(u))).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self { speaker_ids: corpus.speakers.iter().map(|s| s.id.clone()).collect(), waves })
    }

    pub fn num_speakers(&self) -> usize {
        self.waves.len()
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub ce: f64,
    pub ap: f64,
}

/// Owns the model, the speaker classifier, the AP parameters and all
/// optimizer state.
pub struct Trainer {
    pub model: Model,
    pub classifier: Linear,
    pub ap: ApParams,
    pub cfg: TrainConfig,
    data: TrainData,
    sampler: BatchSampler,
    states: BTreeMap<String, AdamState>,
    global_step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        let counts = data.waves.iter().map(Vec::len).collect();
        let sampler = BatchSampler::new(counts, cfg.batch_speakers, cfg.utterances_per_speaker, cfg.seed)?
            .with_passes(cfg.speaker_passes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let classifier = Linear::new("classifier", model.config.embedding_dim, data.num_speakers(), &mut rng);
        Ok(Self {
            model,
            classifier,
            ap: ApParams::default(),
            cfg,
            data,
            sampler,
            states: BTreeMap::new(),
            global_step: 0,
        })
    }

    pub fn sampler(&self) -> &BatchSampler {
        &self.sampler
    }

    fn batch_input(&self, batch: &Batch) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut frames = None;
        for item in &batch.items {
            let wave = &self.data.waves[item.speaker][item.utterance];
            let crop = sample_segments(wave, SegmentMode::Train, item.crop_seed).remove(0);
            let mel = normalize_per_freq(&log_mel(&crop)?)?;
            frames = Some(mel.frames());
            data.extend_from_slice(mel.values.data());
        }
        let t = frames.ok_or_else(|| Error::Data("empty batch".into()))?;
        Tensor::new([batch.items.len(), 1, N_MELS, t], data)
    }

    /// Forward, backward and one Adam update. Returns `(loss, ce, ap)`.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, f64, f64)> {
        let x = self.batch_input(batch)?;
        let rows = batch.items.len();
        let labels: Vec<usize> = batch.items.iter().map(|i| i.speaker).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.model.forward(&mut tape, xv, BatchNormMode::Train)?;
        let emb = tape.time_mean(out.frames)?;
        let logits = self.classifier.forward_tape(&mut tape, emb)?;
        let d = self.model.config.embedding_dim;
        let grouped = tape.reshape(emb, &[rows / batch.per_speaker, batch.per_speaker, d])?;
        let w = tape.param("ap.w", &self.ap.w);
        let b = tape.param("ap.b", &self.ap.b);
        let loss = combined_loss(&mut tape, logits, &labels, grouped, w, b)?;
        let values = [loss.total, loss.ce, loss.ap].map(|v| tape.value(v).data()[0]);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericGuard(format!("non-finite loss at step {}", self.global_step)));
        }
        tape.backward(loss.total)?;

        let wd = self.cfg.weight_decay;
        let states = &mut self.states;
        let mut update = |name: String, t: &mut Tensor, decay: f64| -> Result<()> {
            let Some(g) = tape.param_grad(&name) else { return Ok(()) };
            let state = states.entry(name).or_insert_with(|| AdamState::new(t.numel()));
            adam_step(t.data_mut(), g, state, lr, decay)
        };
        for (name, t) in self.model.named_params_mut() {
            update(name, t, wd)?;
        }
        for (name, t) in self.classifier.named_params_mut() {
            update(name, t, wd)?;
        }
        update("ap.w".into(), &mut self.ap.w, 0.0)?;
        update("ap.b".into(), &mut self.ap.b, 0.0)?;
        self.ap.clamp();
        self.model.update_running_stats(&out.bn_stats);
        self.global_step += 1;
        Ok((values[0], values[1], values[2]))
    }

    /// One epoch at the scheduled learning rate and temperature, logging
    /// `epoch step lr tau loss ce ap` per step.
    pub fn run_epoch(&mut self, epoch: usize, log: &mut dyn Write) -> Result<EpochSummary> {
        let tau = self.cfg.temperature(epoch as i64)?;
        let lr = self.cfg.learning_rate(epoch);
        self.model.set_temperature(tau)?;
        let batches = self.sampler.epoch(epoch);
        let mut sums = [0.0; 3];
        for batch in &batches {
            let (loss, ce, ap) = self.step(batch, lr)?;
            writeln!(log, "{epoch}\t{}\t{lr}\t{tau}\t{loss:.9}\t{ce:.9}\t{ap:.9}", self.global_step)?;
            log.flush()?;
            for (s, v) in sums.iter_mut().zip([loss, ce, ap]) {
                *s += v;
            }
        }
        let k = batches.len() as f64;
        Ok(EpochSummary { epoch, steps: batches.len(), loss: sums[0] / k, ce: sums[1] / k, ap: sums[2] / k })
    }

    pub fn train(&mut self, log: &mut dyn Write) -> Result<Vec<EpochSummary>> {
        (0..self.cfg.epochs).map(|e| self.run_epoch(e, log)).collect()
    }
}
