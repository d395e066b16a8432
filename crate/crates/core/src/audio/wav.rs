use std::fs;
use std::io::Write;
use std::path::Path;

use super::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Mono PCM audio scaled to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn unsupported(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnsupportedFormat { path: path.to_path_buf(), reason: reason.into() }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads a RIFF/WAVE file holding 16-bit PCM mono audio at 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(unsupported(path, "not a RIFF/WAVE container"));
    }
    let mut pos = 12;
    let mut format_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(&bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= bytes.len());
        let Some(end) = end else {
            return Err(unsupported(path, format!("chunk {:?} overruns the file", String::from_utf8_lossy(id))));
        };
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(unsupported(path, "fmt chunk shorter than 16 bytes"));
                }
                let encoding = u16_at(&bytes, body);
                let channels = u16_at(&bytes, body + 2);
                let rate = u32_at(&bytes, body + 4);
                let bits = u16_at(&bytes, body + 14);
                if encoding != 1 {
                    return Err(unsupported(path, format!("encoding tag {encoding} (expected 1, integer PCM)")));
                }
                if channels != 1 {
                    return Err(unsupported(path, format!("{channels} channels (expected mono)")));
                }
                if rate != SAMPLE_RATE {
                    return Err(unsupported(path, format!("sample rate {rate} Hz (expected {SAMPLE_RATE})")));
                }
                if bits != 16 {
                    return Err(unsupported(path, format!("{bits} bits per sample (expected 16)")));
                }
                format_seen = true;
            }
            b"data" => {
                if !format_seen {
                    return Err(unsupported(path, "data chunk precedes fmt chunk"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(Waveform::new(samples));
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(unsupported(path, "no data chunk"))
}

/// Writes 16-bit PCM mono; samples are scaled by 32768 and saturated.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let data_len = (wave.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wave.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut file = fs::File::create(path.as_ref())?;
    file.write_all(&out)?;
    Ok(())
}
