//! Mono waveform container, WAV I/O and basic signal measurements.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every pipeline entry point runs at this rate; there is no resampler.
pub const CANONICAL_RATE: u32 = 16_000;

const PCM16_MAX: f64 = 1.0 - 1.0 / 32768.0;

/// Mono 64-bit waveform. Samples are nominally in `[-1, 1]` and always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadSide {
    Front,
    Back,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidParameter(
                "sample_rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a buffer at the canonical rate.
    pub fn canonical(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, CANONICAL_RATE)
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    /// Crate-internal constructor for kernels that only produce finite values
    /// from finite inputs.
    pub(crate) fn from_parts_unchecked(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
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

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    pub fn ensure_canonical(&self) -> Result<()> {
        if self.sample_rate != CANONICAL_RATE {
            return Err(Error::SampleRate {
                got: self.sample_rate,
                expected: CANONICAL_RATE,
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_non_empty(&self) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::EmptyBuffer)
        } else {
            Ok(())
        }
    }

    /// Returns a copy with a new sample vector at the same rate.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, self.sample_rate)
    }

    /// Clips every sample to `[-1, 1]`.
    pub fn clipped(mut self) -> Self {
        for s in &mut self.samples {
            *s = s.clamp(-1.0, 1.0);
        }
        self
    }

    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_to_len(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }
}

/// Reads a RIFF/WAVE file (PCM-16 or IEEE float-32). Multichannel input is
/// averaged to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedEncoding("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{fmt:?} {bits}-bit")));
        }
    };
    if interleaved.is_empty() {
        return Err(Error::ZeroLength(path.to_path_buf()));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file. PCM-16 clips to `[-1, 1 - 2^-15]`.
///
/// Non-finite samples are rejected before the file is created.
pub fn save_wav(buf: &AudioBuffer, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = buf.samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_wav(buf, BufWriter::new(file), encoding).map_err(|e| wav_err(path, e))
}

/// Encodes a mono WAV file in memory.
pub fn wav_bytes(buf: &AudioBuffer, encoding: WavEncoding) -> Result<Vec<u8>> {
    if let Some(i) = buf.samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut out = std::io::Cursor::new(Vec::new());
    write_wav(buf, &mut out, encoding).map_err(|e| wav_err(Path::new("<memory>"), e))?;
    Ok(out.into_inner())
}

fn write_wav<W: std::io::Write + std::io::Seek>(
    buf: &AudioBuffer,
    sink: W,
    encoding: WavEncoding,
) -> std::result::Result<(), hound::Error> {
    let (bits_per_sample, sample_format) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample,
        sample_format,
    };
    let mut writer = hound::WavWriter::new(sink, spec)?;
    match encoding {
        WavEncoding::Pcm16 => {
            for &s in &buf.samples {
                writer.write_sample(pcm16_code(s))?;
            }
        }
        WavEncoding::Float32 => {
            for &s in &buf.samples {
                writer.write_sample(s as f32)?;
            }
        }
    }
    writer.finalize()
}

fn pcm16_code(s: f64) -> i16 {
    let clipped = s.clamp(-1.0, PCM16_MAX);
    (clipped * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

pub fn energy(samples: &[f64]) -> f64 {
    samples.iter().map(|s| s * s).sum()
}

pub fn rms(buf: &AudioBuffer) -> Result<f64> {
    buf.ensure_non_empty()?;
    Ok((energy(&buf.samples) / buf.len() as f64).sqrt())
}

/// `10 log10(sum clean^2 / sum (noisy - clean)^2)`.
///
/// Identical signals have no perturbation energy; the result is
/// `f64::INFINITY` in that case.
pub fn measured_snr(clean: &AudioBuffer, noisy: &AudioBuffer) -> Result<f64> {
    if clean.len() != noisy.len() {
        return Err(Error::LengthMismatch(clean.len(), noisy.len()));
    }
    clean.ensure_non_empty()?;
    let signal = energy(&clean.samples);
    if signal == 0.0 {
        return Err(Error::ZeroEnergy("clean"));
    }
    let noise: f64 = clean
        .samples
        .iter()
        .zip(&noisy.samples)
        .map(|(c, n)| (n - c) * (n - c))
        .sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Inserts `round(seconds * sample_rate)` zeros at one end.
pub fn pad_silence(buf: &AudioBuffer, seconds: f64, at: PadSide) -> Result<AudioBuffer> {
    if !(seconds >= 0.0) || !seconds.is_finite() {
        return Err(Error::InvalidParameter(format!("pad seconds {seconds}")));
    }
    let n = (seconds * buf.sample_rate as f64).round() as usize;
    let mut out = Vec::with_capacity(buf.len() + n);
    match at {
        PadSide::Front => {
            out.resize(n, 0.0);
            out.extend_from_slice(&buf.samples);
        }
        PadSide::Back => {
            out.extend_from_slice(&buf.samples);
            out.resize(buf.len() + n, 0.0);
        }
    }
    Ok(AudioBuffer::from_parts_unchecked(out, buf.sample_rate))
}
