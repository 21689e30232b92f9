//! Built-in additive noise archetypes.
//!
//! Five license-free textures generated from fixed seeds: white, pink,
//! applause, water drops and room tone. Every entry is normalized to the same
//! RMS so SNR targets are comparable across sources.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use crate::audio::{AudioBuffer, CANONICAL_RATE};
use crate::dsp;
use crate::error::{Error, Result};

const BANK_SECONDS: f64 = 4.0;
const BANK_RMS: f64 = 0.1;

#[derive(Debug, Clone, Default)]
pub struct NoiseBank {
    entries: Vec<(String, AudioBuffer)>,
}

impl NoiseBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let len = (BANK_SECONDS * CANONICAL_RATE as f64) as usize;
        let mut bank = Self::new();
        for (i, name) in ["white", "pink", "applause", "water_drop", "room"]
            .into_iter()
            .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(0x4E01_5E00 + i as u64);
            let raw = match name {
                "white" => white(len, &mut rng),
                "pink" => shaped(len, &mut rng, 1.0),
                "applause" => applause(len, &mut rng),
                "water_drop" => water_drops(len, &mut rng),
                _ => room(len, &mut rng),
            };
            bank.insert(
                name,
                AudioBuffer::from_parts_unchecked(normalize(raw), CANONICAL_RATE),
            );
        }
        bank
    }

    pub fn insert(&mut self, name: impl Into<String>, buf: AudioBuffer) {
        let name = name.into();
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, buf));
    }

    pub fn get(&self, name: &str) -> Result<&AudioBuffer> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::UnknownNoise(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn normalize(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (crate::audio::energy(&x) / x.len() as f64).sqrt();
    if rms > 0.0 {
        for v in &mut x {
            *v *= BANK_RMS / rms;
        }
    }
    x
}

fn white(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gaussian noise with power spectrum proportional to `1 / f^exponent`.
fn shaped(len: usize, rng: &mut ChaCha8Rng, exponent: f64) -> Vec<f64> {
    let w = white(len, rng);
    let mut spec = dsp::forward_real(&w, len);
    let rate = CANONICAL_RATE as f64;
    for (k, c) in spec.iter_mut().enumerate() {
        let f = dsp::bin_frequency(k, len, rate).max(20.0);
        *c *= f.powf(-exponent / 2.0);
    }
    spec[0] = Complex64::new(0.0, 0.0);
    dsp::inverse_real(spec)
}

fn applause(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = CANONICAL_RATE as f64;
    let mut out = vec![0.0; len];
    let claps = (BANK_SECONDS * 40.0) as usize;
    for _ in 0..claps {
        let start = rng.random_range(0..len);
        let decay = rng.random_range(0.002..0.008) * rate;
        let gain: f64 = rng.random_range(0.3..1.0);
        let mut prev = 0.0;
        for (i, o) in out[start..]
            .iter_mut()
            .take((decay * 6.0) as usize)
            .enumerate()
        {
            let n: f64 = rng.sample(StandardNormal);
            // first difference tilts the burst towards high frequencies
            *o += gain * (n - prev) * (-(i as f64) / decay).exp();
            prev = n;
        }
    }
    out
}

fn water_drops(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = CANONICAL_RATE as f64;
    let mut out: Vec<f64> = white(len, rng).into_iter().map(|v| 0.02 * v).collect();
    let drops = (BANK_SECONDS * 6.0) as usize;
    for _ in 0..drops {
        let start = rng.random_range(0..len);
        let f0 = rng.random_range(400.0..900.0);
        let f1 = f0 * rng.random_range(1.5..2.5);
        let dur = rng.random_range(0.02..0.05);
        let n = (dur * 3.0 * rate) as usize;
        let mut phase = 0.0f64;
        for (i, o) in out[start..].iter_mut().take(n).enumerate() {
            let t = i as f64 / rate;
            let f = f0 + (f1 - f0) * (t / dur).min(1.0);
            phase += 2.0 * std::f64::consts::PI * f / rate;
            *o += phase.sin() * (-t / dur).exp();
        }
    }
    out
}

fn room(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = CANONICAL_RATE as f64;
    let rumble = shaped(len, rng, 2.0);
    let r_rms = (crate::audio::energy(&rumble) / len as f64)
        .sqrt()
        .max(1e-12);
    let hiss = shaped(len, rng, 0.5);
    let h_rms = (crate::audio::energy(&hiss) / len as f64).sqrt().max(1e-12);
    (0..len)
        .map(|i| {
            let t = i as f64 / rate;
            let hum = 0.3 * (2.0 * std::f64::consts::PI * 50.0 * t).sin()
                + 0.15 * (2.0 * std::f64::consts::PI * 100.0 * t).sin();
            rumble[i] / r_rms + 0.4 * hiss[i] / h_rms + hum
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_bank_is_deterministic_and_normalized() {
        let a = NoiseBank::builtin();
        let b = NoiseBank::builtin();
        assert_eq!(a.len(), 5);
        for name in a.names() {
            let x = a.get(name).unwrap();
            assert_eq!(x, b.get(name).unwrap());
            let rms = crate::audio::rms(x).unwrap();
            assert!((rms - BANK_RMS).abs() < 1e-9, "{name} {rms}");
        }
        assert!(a.get("nope").is_err());
    }
}
