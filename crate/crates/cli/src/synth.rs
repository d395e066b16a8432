//! Seeded synthetic speakers built from three kinds of units: voiced
//! harmonic tones shaped by formant resonances, band-passed noise, and a
//! silent closure followed by a noise burst.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdycnn::audio::{write_wav, Waveform, SAMPLE_RATE};
use tdycnn::{Error, Result};

use crate::OutputGuard;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Trailing utterances of every speaker reserved for trials.
    pub held_out_per_speaker: usize,
    /// Trials written to `trials.txt`, half of them target trials.
    pub num_trials: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            utterances_per_speaker: 12,
            held_out_per_speaker: 4,
            num_trials: 200,
            min_seconds: 2.0,
            max_seconds: 5.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::Config("num_speakers must be at least 2".into()));
        }
        if self.held_out_per_speaker > self.utterances_per_speaker {
            return Err(Error::Config("held_out_per_speaker exceeds utterances_per_speaker".into()));
        }
        if !(self.min_seconds > 0.0 && self.min_seconds <= self.max_seconds) {
            return Err(Error::Config("need 0 < min_seconds <= max_seconds".into()));
        }
        if self.num_trials > 0 && self.held_out_per_speaker < 2 {
            return Err(Error::Config("trials need at least 2 held-out utterances per speaker".into()));
        }
        Ok(())
    }
}

/// Per-speaker voice parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub f0: f64,
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
    /// Harmonic amplitude falls as `h^-tilt`.
    pub tilt: f64,
    /// Multiplies the noise band centers.
    pub noise_scale: f64,
}

const VOWELS: [(&str, [f64; 3]); 4] = [
    ("aa", [730.0, 1090.0, 2440.0]),
    ("iy", [270.0, 2290.0, 3010.0]),
    ("uw", [300.0, 870.0, 2240.0]),
    ("eh", [530.0, 1840.0, 2480.0]),
];
const FRICATIVES: [(&str, f64, f64); 3] = [("s", 5500.0, 4.0), ("sh", 3000.0, 3.0), ("f", 4500.0, 1.0)];
const STOPS: [(&str, f64); 3] = [("p", 900.0), ("t", 4000.0), ("k", 2000.0)];

pub fn voice(spec: &SynthSpec, speaker: usize) -> Voice {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + speaker as u64);
    // speakers sit on an f0 x formant grid so every pair differs in at least one coarse axis
    let cols = (spec.num_speakers as f64).sqrt().ceil() as usize;
    let rows = spec.num_speakers.div_ceil(cols);
    let u = ((speaker % cols) as f64 + rng.random_range(0.35..0.65)) / cols as f64;
    let r = ((speaker / cols) as f64 + rng.random_range(0.35..0.65)) / rows as f64;
    Voice {
        f0: 80.0 * (280.0f64 / 80.0).powf(u),
        formant_scale: 0.78 * (1.3f64 / 0.78).powf(r),
        tilt: rng.random_range(0.6..1.6),
        noise_scale: rng.random_range(0.8..1.2),
    }
}

struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    /// Constant 0 dB peak band-pass.
    fn bandpass(center: f64, q: f64) -> Self {
        let w = 2.0 * PI * center.min(0.45 * SAMPLE_RATE as f64) / SAMPLE_RATE as f64;
        let alpha = w.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self { b: [alpha / a0, 0.0, -alpha / a0], a: [-2.0 * w.cos() / a0, (1.0 - alpha) / a0], z: [0.0; 2] }
    }

    fn run(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

fn envelope(i: usize, len: usize) -> f64 {
    let ramp = (SAMPLE_RATE as usize / 100).min(len / 2).max(1);
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

fn vowel(v: &Voice, formants: &[f64; 3], len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f0 = v.f0 * rng.random_range(0.98..1.02);
    let rate = rng.random_range(4.0..6.0);
    let fs = SAMPLE_RATE as f64;
    let peaks: Vec<f64> = formants.iter().map(|f| f * v.formant_scale).collect();
    let harmonics = (4000.0 / f0) as usize;
    let amps: Vec<f64> = (1..=harmonics)
        .map(|h| {
            let f = h as f64 * f0;
            let gain: f64 = peaks.iter().map(|p| 1.0 / (1.0 + ((f - p) / (60.0 + 0.08 * p)).powi(2))).sum();
            (0.05 + gain) / (h as f64).powf(v.tilt)
        })
        .collect();
    let norm: f64 = amps.iter().sum();
    let mut phase = 0.0;
    (0..len)
        .map(|i| {
            let t = i as f64 / fs;
            phase += 2.0 * PI * f0 * (1.0 + 0.015 * (2.0 * PI * rate * t).sin()) / fs;
            let s: f64 = amps.iter().enumerate().map(|(h, a)| a * ((h + 1) as f64 * phase).sin()).sum();
            0.5 * s / norm * envelope(i, len)
        })
        .collect()
}

fn fricative(v: &Voice, center: f64, q: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut filt = Biquad::bandpass(center * v.noise_scale, q);
    let gain = rng.random_range(0.2..0.35);
    (0..len).map(|i| gain * filt.run(rng.random_range(-1.0..1.0)) * 2.0 * envelope(i, len)).collect()
}

fn stop(v: &Voice, center: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let burst = (len / 4).max(1);
    let mut filt = Biquad::bandpass(center * v.noise_scale, 2.0);
    (0..len)
        .map(|i| {
            if i + burst < len {
                0.0
            } else {
                let k = i + burst - len;
                0.8 * filt.run(rng.random_range(-1.0..1.0)) * (-(k as f64) / (burst as f64 / 3.0)).exp()
            }
        })
        .collect()
}

/// One utterance and its `start end label` lines.
pub fn utterance(spec: &SynthSpec, speaker: usize, index: usize) -> (Waveform, String) {
    let v = voice(spec, speaker);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0000);
    rng.set_stream(((speaker as u64) << 32) | index as u64);
    let fs = SAMPLE_RATE as f64;
    let total = (rng.random_range(spec.min_seconds..=spec.max_seconds) * fs) as usize;
    let mut samples = Vec::with_capacity(total);
    let mut phn = String::new();
    while samples.len() < total {
        let kind = rng.random_range(0.0..1.0);
        let (label, mut unit) = if kind < 0.45 {
            let (label, f) = VOWELS[rng.random_range(0..VOWELS.len())];
            let len = (rng.random_range(0.10..0.25) * fs) as usize;
            (label, vowel(&v, &f, len, &mut rng))
        } else if kind < 0.75 {
            let (label, c, q) = FRICATIVES[rng.random_range(0..FRICATIVES.len())];
            let len = (rng.random_range(0.08..0.18) * fs) as usize;
            (label, fricative(&v, c, q, len, &mut rng))
        } else {
            let (label, c) = STOPS[rng.random_range(0..STOPS.len())];
            let len = (rng.random_range(0.05..0.09) * fs) as usize;
            (label, stop(&v, c, len, &mut rng))
        };
        unit.truncate(total - samples.len());
        let start = samples.len();
        samples.extend(unit);
        writeln!(phn, "{start} {} {label}", samples.len()).expect("string write");
    }
    for s in &mut samples {
        *s += 1e-3 * rng.random_range(-1.0..1.0);
    }
    (Waveform::new(samples), phn)
}

pub fn speaker_id(i: usize) -> String {
    format!("spk{i:02}")
}

pub fn utterance_path(speaker: usize, index: usize) -> PathBuf {
    PathBuf::from(speaker_id(speaker)).join(format!("utt{index:02}.wav"))
}

/// Target and nontarget pairs over the held-out utterances, shuffled.
pub fn trial_lines(spec: &SynthSpec) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7121_a15);
    let held: Vec<Vec<PathBuf>> = (0..spec.num_speakers)
        .map(|s| {
            (spec.utterances_per_speaker - spec.held_out_per_speaker..spec.utterances_per_speaker)
                .map(|u| utterance_path(s, u))
                .collect()
        })
        .collect();
    let mut targets = Vec::new();
    for utts in &held {
        for a in 0..utts.len() {
            for b in a + 1..utts.len() {
                targets.push((true, utts[a].clone(), utts[b].clone()));
            }
        }
    }
    targets.shuffle(&mut rng);
    let n_target = (spec.num_trials / 2).min(targets.len());
    let mut trials: Vec<_> = targets.into_iter().take(n_target).collect();
    let mut nontargets = Vec::new();
    while nontargets.len() < spec.num_trials - n_target {
        let (s1, s2) = (rng.random_range(0..held.len()), rng.random_range(0..held.len()));
        if s1 == s2 {
            continue;
        }
        let a = held[s1][rng.random_range(0..held[s1].len())].clone();
        let b = held[s2][rng.random_range(0..held[s2].len())].clone();
        if !nontargets.iter().any(|(_, x, y)| (x == &a && y == &b) || (x == &b && y == &a)) {
            nontargets.push((false, a, b));
        }
    }
    trials.extend(nontargets);
    trials.shuffle(&mut rng);
    let mut out = String::new();
    for (target, a, b) in trials {
        writeln!(out, "{} {} {}", u8::from(target), a.display(), b.display()).expect("string write");
    }
    out
}

/// Writes `<out>/<spk>/<utt>.wav`, the matching `.phn` files and, when
/// trials are requested, `<out>/trials.txt`.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let mut guard = OutputGuard::new(out)?;
    for s in 0..spec.num_speakers {
        guard.create_dir(&out.join(speaker_id(s)))?;
        for u in 0..spec.utterances_per_speaker {
            let (wave, phn) = utterance(spec, s, u);
            let wav = out.join(utterance_path(s, u));
            guard.track(&wav);
            write_wav(&wav, &wave)?;
            guard.write(&wav.with_extension("phn"), phn.as_bytes())?;
        }
    }
    if spec.num_trials > 0 {
        guard.write(&out.join("trials.txt"), trial_lines(spec).as_bytes())?;
    }
    guard.commit();
    Ok(())
}

/// Held-out utterances named in a trial list.
pub fn trial_paths(text: &str) -> Vec<PathBuf> {
    text.lines().flat_map(|l| l.split_whitespace().skip(1).map(PathBuf::from)).collect()
}
