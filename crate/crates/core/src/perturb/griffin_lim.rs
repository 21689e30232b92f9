//! STFT magnitude round trip through iterative phase reconstruction.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioBuffer;
use crate::dsp::hann;
use crate::error::{Error, Result};

pub const WINDOW: usize = 512;
pub const HOP: usize = 128;

struct Stft {
    window: Vec<f64>,
    /// Sum of squared windows over all frames, per padded sample.
    norm: Vec<f64>,
    frames: usize,
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(len: usize) -> Self {
        let frames = if len <= WINDOW {
            1
        } else {
            (len - WINDOW).div_ceil(HOP) + 1
        };
        let padded = (frames - 1) * HOP + WINDOW;
        let window = hann(WINDOW);
        let mut norm = vec![0.0; padded];
        for f in 0..frames {
            for (i, w) in window.iter().enumerate() {
                norm[f * HOP + i] += w * w;
            }
        }
        let mut planner = FftPlanner::new();
        Self {
            window,
            norm,
            frames,
            len: padded,
            forward: planner.plan_fft_forward(WINDOW),
            inverse: planner.plan_fft_inverse(WINDOW),
        }
    }

    fn analyze(&self, x: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.frames * WINDOW];
        for (f, frame) in out.chunks_exact_mut(WINDOW).enumerate() {
            let start = f * HOP;
            for (i, c) in frame.iter_mut().enumerate() {
                let v = x.get(start + i).copied().unwrap_or(0.0);
                *c = Complex64::new(v * self.window[i], 0.0);
            }
            self.forward.process(frame);
        }
        out
    }

    /// Least-squares inverse: windowed overlap-add divided by the summed
    /// squared window. Samples with zero window support are set to zero.
    fn synthesize(&self, spec: &[Complex64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.len];
        let mut frame = vec![Complex64::new(0.0, 0.0); WINDOW];
        let scale = 1.0 / WINDOW as f64;
        for (f, s) in spec.chunks_exact(WINDOW).enumerate() {
            frame.copy_from_slice(s);
            self.inverse.process(&mut frame);
            let start = f * HOP;
            for (i, c) in frame.iter().enumerate() {
                acc[start + i] += c.re * scale * self.window[i];
            }
        }
        for (a, n) in acc.iter_mut().zip(&self.norm) {
            *a = if *n > 1e-12 { *a / n } else { 0.0 };
        }
        acc
    }
}

/// Output waveform plus the per-iteration spectral inconsistency
/// `|| |STFT(x_i)| - S ||_F`.
#[derive(Debug, Clone)]
pub struct GriffinLimRun {
    pub output: AudioBuffer,
    pub consistency_errors: Vec<f64>,
}

pub fn apply_griffin_lim(x: &AudioBuffer, iterations: u32) -> Result<AudioBuffer> {
    griffin_lim_logged(x, iterations).map(|r| r.output)
}

/// Classical phase reconstruction starting from zero phase. Iteration `i`
/// synthesizes a waveform from the current spectrum estimate, re-analyzes it
/// and keeps its phase with the target magnitude.
pub fn griffin_lim_logged(x: &AudioBuffer, iterations: u32) -> Result<GriffinLimRun> {
    if iterations == 0 {
        return Err(Error::InvalidParameter(
            "griffin-lim iterations must be >= 1".into(),
        ));
    }
    x.ensure_non_empty()?;
    let pad = WINDOW - HOP;
    let mut padded = vec![0.0; pad];
    padded.extend_from_slice(x.samples());
    let stft = Stft::new(padded.len() + pad);
    padded.resize(stft.len, 0.0);

    let target: Vec<f64> = stft.analyze(&padded).iter().map(|c| c.norm()).collect();
    let mut estimate: Vec<Complex64> = target.iter().map(|&m| Complex64::new(m, 0.0)).collect();
    let mut errors = Vec::with_capacity(iterations as usize);
    let mut signal = Vec::new();
    for _ in 0..iterations {
        signal = stft.synthesize(&estimate);
        let analysis = stft.analyze(&signal);
        let mut err = 0.0;
        for ((est, a), &m) in estimate.iter_mut().zip(&analysis).zip(&target) {
            let mag = a.norm();
            err += (mag - m) * (mag - m);
            *est = if mag > 0.0 {
                a * (m / mag)
            } else {
                Complex64::new(m, 0.0)
            };
        }
        errors.push(err.sqrt());
    }
    let out: Vec<f64> = signal[pad..pad + x.len()].to_vec();
    Ok(GriffinLimRun {
        output: AudioBuffer::from_parts_unchecked(out, x.sample_rate()),
        consistency_errors: errors,
    })
}

/// Relative L2 distance between the magnitude spectrograms of two signals.
pub fn magnitude_error(reference: &AudioBuffer, other: &AudioBuffer) -> f64 {
    let stft = Stft::new(reference.len().max(other.len()));
    let a = stft.analyze(reference.samples());
    let b = stft.analyze(other.samples());
    let num: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (p.norm() - q.norm()).powi(2))
        .sum();
    let den: f64 = a.iter().map(|p| p.norm_sqr()).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}
