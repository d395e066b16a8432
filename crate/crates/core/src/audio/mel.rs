use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{frame_count, Waveform, FRAME_HOP, FRAME_WIDTH, N_FFT, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LOG_FLOOR: f64 = 1e-10;
const VAR_FLOOR: f64 = 1e-12;

/// Log filterbank energies, `[N_MELS, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub frame_hop: usize,
    pub frame_width: usize,
}

impl MelSpectrogram {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 2 || values.shape()[0] != N_MELS {
            return Err(Error::Dimension(format!("mel spectrogram must be [{N_MELS}, T], got {:?}", values.shape())));
        }
        values.check_finite("mel spectrogram")?;
        Ok(Self { values, frame_hop: FRAME_HOP, frame_width: FRAME_WIDTH })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, bin: usize) -> &[f64] {
        let t = self.frames();
        &self.values.data()[bin * t..(bin + 1) * t]
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK Mel scale spanning 0 Hz to Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[N_MELS][N_FFT / 2 + 1]`
    weights: Vec<Vec<f64>>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges: Vec<f64> =
            (0..N_MELS + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64)).collect();
        let bins = N_FFT / 2 + 1;
        let bin_hz: Vec<f64> = (0..bins).map(|k| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64).collect();
        let weights = (0..N_MELS)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                bin_hz
                    .iter()
                    .map(|&f| {
                        let rise = (f - left) / (center - left);
                        let fall = (right - f) / (right - center);
                        rise.min(fall).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self { weights, centers: edges[1..=N_MELS].to_vec() }
    }

    /// Center frequency of each filter in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn weights(&self, filter: usize) -> &[f64] {
        &self.weights[filter]
    }

    /// Index of the filter whose center is closest to `hz`.
    pub fn nearest_filter(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.centers.iter().enumerate() {
            if (c - hz).abs() < (self.centers[best] - hz).abs() {
                best = i;
            }
        }
        best
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

/// Windowing, FFT and filterbank state shared across calls.
pub struct LogMelExtractor {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl LogMelExtractor {
    pub fn new() -> Self {
        // Periodic Hamming window.
        let window = (0..FRAME_WIDTH)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / FRAME_WIDTH as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self { window, fft, filterbank: MelFilterbank::new() }
    }

    /// Process-wide shared instance.
    pub fn shared() -> &'static LogMelExtractor {
        static SHARED: OnceLock<LogMelExtractor> = OnceLock::new();
        SHARED.get_or_init(LogMelExtractor::new)
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, wave: &Waveform) -> Result<MelSpectrogram> {
        let frames = frame_count(wave.len());
        if frames == 0 {
            return Err(Error::TooShort(format!(
                "{} samples is shorter than one {FRAME_WIDTH}-sample window",
                wave.len()
            )));
        }
        let bins = N_FFT / 2 + 1;
        let mut out = vec![0.0; N_MELS * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = vec![0.0; bins];
        for t in 0..frames {
            let frame = &wave.samples[t * FRAME_HOP..t * FRAME_HOP + FRAME_WIDTH];
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < FRAME_WIDTH { frame[i] * self.window[i] } else { 0.0 };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..N_MELS {
                let energy: f64 = self.filterbank.weights[m].iter().zip(&power).map(|(w, p)| w * p).sum();
                out[m * frames + t] = energy.max(LOG_FLOOR).ln();
            }
        }
        MelSpectrogram::new(Tensor::new([N_MELS, frames], out)?)
    }
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

/// 64-bin log-Mel spectrogram with a 25 ms Hamming window and 10 ms hop.
pub fn log_mel(wave: &Waveform) -> Result<MelSpectrogram> {
    LogMelExtractor::shared().extract(wave)
}

/// Per-bin mean and variance normalization over time.
pub fn normalize_per_freq(mel: &MelSpectrogram) -> Result<MelSpectrogram> {
    let t = mel.frames();
    if t < 2 {
        return Err(Error::TooShort(format!("normalization needs at least 2 frames, got {t}")));
    }
    let mut out = mel.values.data().to_vec();
    for row in out.chunks_exact_mut(t) {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        let scale = 1.0 / var.max(VAR_FLOOR).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    }
    MelSpectrogram::new(Tensor::new([N_MELS, t], out)?)
}
