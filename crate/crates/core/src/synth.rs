//! Synthetic speech-like reference signals.
//!
//! A voiced harmonic source with drifting pitch, moving formant weights and a
//! syllabic envelope, plus short fricative noise bursts. Good enough to give
//! the perturbation kernels and the metric realistic spectral structure.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::{AudioBuffer, CANONICAL_RATE};

const PEAK: f64 = 0.5;

fn formant_gain(f: f64, centers: &[(f64, f64)]) -> f64 {
    centers
        .iter()
        .map(|&(c, bw)| 1.0 / (1.0 + ((f - c) / bw).powi(2)))
        .sum::<f64>()
}

/// `len` samples at the canonical rate, peak-normalized to 0.5.
pub fn speech_like(seed: u64, len: usize) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = CANONICAL_RATE as f64;
    let f0_base = rng.random_range(95.0..220.0);
    let syllable_rate = rng.random_range(3.0..5.5);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let vowels: Vec<[(f64, f64); 3]> = (0..6)
        .map(|_| {
            [
                (rng.random_range(300.0..850.0), 80.0),
                (rng.random_range(850.0..2300.0), 120.0),
                (rng.random_range(2300.0..3200.0), 180.0),
            ]
        })
        .collect();
    let drift = rng.random_range(-0.2..0.2);

    let mut out = vec![0.0; len];
    let mut phase = 0.0f64;
    let harmonics = 30;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let f0 = f0_base * (1.0 + drift * (t / 2.0) + 0.03 * (2.0 * PI * 5.0 * t).sin());
        phase += 2.0 * PI * f0 / rate;
        let syl = syllable_rate * t / 1.0;
        let vi = (syl as usize) % vowels.len();
        let vj = (vi + 1) % vowels.len();
        let frac = syl.fract();
        let centers: Vec<(f64, f64)> = vowels[vi]
            .iter()
            .zip(&vowels[vj])
            .map(|(a, b)| (a.0 + (b.0 - a.0) * frac, a.1))
            .collect();
        let mut v = 0.0;
        for h in 1..=harmonics {
            let f = f0 * h as f64;
            if f > rate / 2.0 - 200.0 {
                break;
            }
            v += formant_gain(f, &centers) * (h as f64 * phase).sin() / (h as f64).sqrt();
        }
        let env = (0.5 - 0.5 * (2.0 * PI * syllable_rate * t + syllable_phase).cos()).powf(1.5);
        *o = v * env;
    }

    // fricatives in the envelope troughs
    let bursts = ((len as f64 / rate) * syllable_rate * 0.5).ceil() as usize;
    for _ in 0..bursts {
        let start = rng.random_range(0..len);
        let dur = (rng.random_range(0.03..0.08) * rate) as usize;
        let mut prev = 0.0;
        for (k, o) in out[start..].iter_mut().take(dur).enumerate() {
            let n: f64 = rng.sample(StandardNormal);
            let w = (PI * k as f64 / dur as f64).sin();
            *o += 0.15 * (n - prev) * w;
            prev = n;
        }
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v *= PEAK / peak;
        }
    }
    AudioBuffer::from_parts_unchecked(out, CANONICAL_RATE)
}
