//! Individual degradation kernels. Each takes concrete parameters; strength
//! mapping and sequencing live in the parent module.

use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioBuffer, WavEncoding};
use crate::dsp;
use crate::error::{Error, Result};

pub const MU_LAW: f64 = 255.0;
pub const EQ_FULL_DEPTH_DB: f64 = 24.0;
const EQ_TRANSITION_HZ: f64 = 100.0;
pub const DROPOUT_SEGMENT_SECONDS: f64 = 0.010;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EqBand {
    Low,
    Mid,
    High,
}

impl EqBand {
    /// Band edges in Hz. The upper edge of `High` is the canonical Nyquist.
    pub fn edges(self) -> (f64, f64) {
        match self {
            EqBand::Low => (0.0, 500.0),
            EqBand::Mid => (500.0, 2000.0),
            EqBand::High => (2000.0, 8000.0),
        }
    }

    /// Band membership in `[0, 1]` with raised-cosine transitions centred on
    /// interior edges.
    pub fn mask(self, f: f64) -> f64 {
        let (lo, hi) = self.edges();
        let half = EQ_TRANSITION_HZ / 2.0;
        let rise = if lo <= 0.0 {
            1.0
        } else {
            ramp((f - (lo - half)) / EQ_TRANSITION_HZ)
        };
        let fall = if hi >= 8000.0 {
            1.0
        } else {
            1.0 - ramp((f - (hi - half)) / EQ_TRANSITION_HZ)
        };
        rise * fall
    }
}

fn ramp(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    0.5 - 0.5 * (std::f64::consts::PI * u).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EqMode {
    Cut,
    Boost,
}

/// `x + g * noise[start..]` (noise looped when shorter than `x`) with `g`
/// chosen so the measured SNR equals `snr_db`.
pub fn apply_additive(
    x: &AudioBuffer,
    noise: &AudioBuffer,
    snr_db: f64,
    start: usize,
) -> Result<AudioBuffer> {
    x.ensure_non_empty()?;
    noise.ensure_non_empty()?;
    let signal = audio::energy(x.samples());
    if signal == 0.0 {
        return Err(Error::ZeroEnergy("signal"));
    }
    let n = noise.samples();
    let segment: Vec<f64> = (0..x.len()).map(|i| n[(start + i) % n.len()]).collect();
    let noise_energy = audio::energy(&segment);
    if noise_energy == 0.0 {
        return Err(Error::ZeroEnergy("noise"));
    }
    let gain = (signal / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    let out = x
        .samples()
        .iter()
        .zip(&segment)
        .map(|(s, v)| s + gain * v)
        .collect();
    Ok(AudioBuffer::from_parts_unchecked(out, x.sample_rate()))
}

/// Synthetic room impulse response: unit direct impulse followed by a
/// Gaussian tail whose energy envelope falls 60 dB over `rt60_s`, scaled so
/// that direct-to-tail energy equals `drr_db`.
pub fn synth_ir(drr_db: f64, rt60_s: f64, seed: u64, sample_rate: u32) -> Result<AudioBuffer> {
    if !(rt60_s > 0.0) {
        return Err(Error::InvalidParameter(format!("rt60 {rt60_s}")));
    }
    let rate = sample_rate as f64;
    let tail_len = (rt60_s * rate).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ir = Vec::with_capacity(tail_len + 1);
    ir.push(1.0);
    for k in 1..=tail_len {
        let t = k as f64 / rate;
        // amplitude envelope: energy drops 60 dB at rt60
        let env = 10f64.powf(-3.0 * t / rt60_s);
        let n: f64 = rng.sample(StandardNormal);
        ir.push(n * env);
    }
    let tail_energy = audio::energy(&ir[1..]);
    let wanted = 10f64.powf(-drr_db / 10.0);
    let scale = if tail_energy > 0.0 {
        (wanted / tail_energy).sqrt()
    } else {
        0.0
    };
    for v in &mut ir[1..] {
        *v *= scale;
    }
    Ok(AudioBuffer::from_parts_unchecked(ir, sample_rate))
}

/// Convolution truncated to `len(x)`, then peak-normalized to `max|x|`.
pub fn apply_reverb(x: &AudioBuffer, ir: &AudioBuffer) -> Result<AudioBuffer> {
    if x.sample_rate() != ir.sample_rate() {
        return Err(Error::SampleRate {
            got: ir.sample_rate(),
            expected: x.sample_rate(),
        });
    }
    let mut y = dsp::convolve_truncated(x.samples(), ir.samples());
    let peak_in = x.peak();
    let peak_out = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak_out > 0.0 {
        let g = peak_in / peak_out;
        for v in &mut y {
            *v *= g;
        }
    }
    Ok(AudioBuffer::from_parts_unchecked(y, x.sample_rate()))
}

pub fn mulaw_compress(x: f64) -> f64 {
    x.signum() * (1.0 + MU_LAW * x.abs()).ln() / (1.0 + MU_LAW).ln()
}

pub fn mulaw_expand(y: f64) -> f64 {
    y.signum() * ((1.0 + MU_LAW).powf(y.abs()) - 1.0) / MU_LAW
}

/// Uniform quantizer on `[-1, 1]` with `2^bits` levels (endpoints included).
pub fn quantize_uniform(y: f64, bits: u32) -> f64 {
    let steps = 2f64.powi(bits as i32) - 1.0;
    let u = ((y.clamp(-1.0, 1.0) + 1.0) / 2.0 * steps).round() / steps;
    u * 2.0 - 1.0
}

/// mu-law companding, re-quantization to `bits`, expansion.
pub fn apply_mulaw(x: &AudioBuffer, bits: u32) -> Result<AudioBuffer> {
    if !(1..=60).contains(&bits) {
        return Err(Error::InvalidParameter(format!("mu-law bits {bits}")));
    }
    let out = x
        .samples()
        .iter()
        .map(|&s| mulaw_expand(quantize_uniform(mulaw_compress(s.clamp(-1.0, 1.0)), bits)))
        .collect();
    Ok(AudioBuffer::from_parts_unchecked(out, x.sample_rate()))
}

/// Gain of `+-24 * depth` dB over one band, applied in the DFT domain.
pub fn apply_eq(x: &AudioBuffer, band: EqBand, depth: f64, mode: EqMode) -> Result<AudioBuffer> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::InvalidParameter(format!("eq depth {depth}")));
    }
    x.ensure_non_empty()?;
    let n = x.len();
    let rate = x.sample_rate() as f64;
    let sign = match mode {
        EqMode::Cut => -1.0,
        EqMode::Boost => 1.0,
    };
    let mut spec = dsp::forward_real(x.samples(), n);
    for (k, c) in spec.iter_mut().enumerate() {
        let f = dsp::bin_frequency(k, n, rate);
        let db = sign * EQ_FULL_DEPTH_DB * depth * band.mask(f);
        *c *= 10f64.powf(db / 20.0);
    }
    Ok(AudioBuffer::from_parts_unchecked(
        dsp::inverse_real(spec),
        x.sample_rate(),
    ))
}

/// One step of a partial Fisher-Yates shuffle. Drawing `k` items yields the
/// first `k` of any longer draw with the same seed, so damaged positions nest
/// as the fraction grows.
fn take_next(order: &mut [usize], i: usize, rng: &mut ChaCha8Rng) -> usize {
    let j = rng.random_range(i..order.len());
    order.swap(i, j);
    order[i]
}

/// Number of samples a percentage of `len` corresponds to.
pub fn fraction_count(fraction_pct: f64, len: usize) -> usize {
    (fraction_pct / 100.0 * len as f64).round() as usize
}

/// Replaces `round(fraction_pct% * len)` distinct seeded positions with
/// random values of magnitude in `[0.5, 1]`.
pub fn apply_pops(x: &AudioBuffer, fraction_pct: f64, seed: u64) -> Result<AudioBuffer> {
    if !(0.0..=100.0).contains(&fraction_pct) {
        return Err(Error::InvalidParameter(format!("pops {fraction_pct}%")));
    }
    let len = x.len();
    let count = fraction_count(fraction_pct, len).min(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    let mut out = x.samples().to_vec();
    for i in 0..count {
        let p = take_next(&mut order, i, &mut rng);
        let mag: f64 = rng.random_range(0.5..=1.0);
        let mut v = if rng.random::<bool>() { mag } else { -mag };
        if v == out[p] {
            v = -v;
        }
        out[p] = v;
    }
    Ok(AudioBuffer::from_parts_unchecked(out, x.sample_rate()))
}

/// Zeroes non-overlapping 10 ms segments until the zeroed count is within one
/// segment of `fraction_pct% * len`.
pub fn apply_dropouts(x: &AudioBuffer, fraction_pct: f64, seed: u64) -> Result<AudioBuffer> {
    if !(0.0..=100.0).contains(&fraction_pct) {
        return Err(Error::InvalidParameter(format!("dropouts {fraction_pct}%")));
    }
    let len = x.len();
    let seg = ((DROPOUT_SEGMENT_SECONDS * x.sample_rate() as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..seg).min(len.saturating_sub(1));
    let slots = (len - offset) / seg;
    let target = fraction_pct / 100.0 * len as f64;
    let wanted = ((target / seg as f64).round() as usize).min(slots);
    let mut order: Vec<usize> = (0..slots).collect();
    let mut out = x.samples().to_vec();
    for i in 0..wanted {
        let slot = take_next(&mut order, i, &mut rng);
        let start = offset + slot * seg;
        out[start..start + seg].fill(0.0);
    }
    Ok(AudioBuffer::from_parts_unchecked(out, x.sample_rate()))
}

/// Shell command template for an external encode/decode round trip.
/// Placeholders: `{in}`, `{out}` (both WAV paths) and `{bitrate}` (kb/s).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecHook {
    pub command: String,
}

impl CodecHook {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
        }
    }

    fn render(&self, input: &Path, output: &Path, bitrate_kbps: f64) -> String {
        self.command
            .replace("{in}", &input.to_string_lossy())
            .replace("{out}", &output.to_string_lossy())
            .replace("{bitrate}", &format!("{}", bitrate_kbps.round() as u32))
    }
}

pub fn apply_external_codec(
    x: &AudioBuffer,
    bitrate_kbps: f64,
    hook: Option<&CodecHook>,
) -> Result<AudioBuffer> {
    let hook = hook.ok_or(Error::CodecNotConfigured)?;
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("in.wav");
    let output = dir.path().join("out.wav");
    audio::save_wav(x, &input, WavEncoding::Pcm16)?;
    let command = hook.render(&input, &output, bitrate_kbps);
    let result = Command::new("sh").arg("-c").arg(&command).output();
    let out = match result {
        Ok(o) => o,
        Err(e) => {
            return Err(Error::CodecFailed {
                command,
                detail: e.to_string(),
            })
        }
    };
    if !out.status.success() {
        return Err(Error::CodecFailed {
            command,
            detail: format!(
                "exit {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr).trim()
            ),
        });
    }
    let decoded = audio::load_wav(&output).map_err(|e| Error::CodecFailed {
        command: command.clone(),
        detail: e.to_string(),
    })?;
    if decoded.sample_rate() != x.sample_rate() {
        return Err(Error::CodecFailed {
            command,
            detail: format!("decoder returned {} Hz", decoded.sample_rate()),
        });
    }
    Ok(decoded.fit_to_len(x.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{measured_snr, CANONICAL_RATE};
    use crate::synth;

    fn tone(freq: f64, len: usize, amp: f64) -> AudioBuffer {
        AudioBuffer::canonical(
            (0..len)
                .map(|i| {
                    amp * (2.0 * std::f64::consts::PI * freq * i as f64 / CANONICAL_RATE as f64)
                        .sin()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn additive_hits_target_snr() {
        let x = synth::speech_like(1, 16000);
        let bank = crate::perturb::NoiseBank::builtin();
        let noise = bank.get("pink").unwrap();
        for snr in [2.0, 20.0, 66.0] {
            let y = apply_additive(&x, noise, snr, 1234).unwrap();
            assert!((measured_snr(&x, &y).unwrap() - snr).abs() < 1e-9);
        }
        // 66 dB: perturbation energy 66 dB below the signal, i.e. well past 64 dB
        let y = apply_additive(&x, noise, 66.0, 0).unwrap();
        let pert: f64 = x
            .samples()
            .iter()
            .zip(y.samples())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(10.0 * (audio::energy(x.samples()) / pert).log10() >= 64.0);
        let silent = AudioBuffer::zeros(100, CANONICAL_RATE);
        assert!(apply_additive(&x, &silent, 20.0, 0).is_err());
        assert!(apply_additive(&silent, noise, 20.0, 0).is_err());
    }

    #[test]
    fn additive_loops_short_noise() {
        let x = tone(300.0, 1000, 0.3);
        let noise = AudioBuffer::canonical(vec![0.1, -0.2, 0.3]).unwrap();
        let y = apply_additive(&x, &noise, 10.0, 2).unwrap();
        assert!((measured_snr(&x, &y).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn ir_drr_and_length() {
        let ir = synth_ir(10.0, 0.4, 9, CANONICAL_RATE).unwrap();
        let direct = ir.samples()[0].powi(2);
        let tail = audio::energy(&ir.samples()[1..]);
        assert!((10.0 * (direct / tail).log10() - 10.0).abs() < 0.5);
        let short = synth_ir(0.0, 0.05, 2, CANONICAL_RATE).unwrap();
        assert!(short.duration_secs() <= 0.15);
    }

    #[test]
    fn reverb_identity_and_shift() {
        let x = synth::speech_like(4, 3000);
        let delta = AudioBuffer::canonical(vec![1.0]).unwrap();
        let y = apply_reverb(&x, &delta).unwrap();
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
        // peak sits early, so truncation keeps it and the gain stays 1
        let mut early = vec![0.0; 400];
        early[10] = 0.8;
        for (i, v) in early.iter_mut().enumerate().skip(11) {
            *v = 0.1 * ((i as f64) * 0.3).sin();
        }
        let x = AudioBuffer::canonical(early).unwrap();
        let mut d = vec![0.0; 8];
        d[7] = 1.0;
        let y = apply_reverb(&x, &AudioBuffer::canonical(d).unwrap()).unwrap();
        for i in 0..x.len() {
            let want = if i >= 7 { x.samples()[i - 7] } else { 0.0 };
            assert!((y.samples()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reverb_is_linear_before_normalization() {
        let x1 = synth::speech_like(1, 2000);
        let x2 = synth::speech_like(2, 2000);
        let ir = synth_ir(0.0, 0.1, 5, CANONICAL_RATE).unwrap();
        let sum: Vec<f64> = x1
            .samples()
            .iter()
            .zip(x2.samples())
            .map(|(a, b)| a + b)
            .collect();
        let lhs = dsp::convolve_truncated(&sum, ir.samples());
        let a = dsp::convolve_truncated(x1.samples(), ir.samples());
        let b = dsp::convolve_truncated(x2.samples(), ir.samples());
        for i in 0..lhs.len() {
            // direct-sum oracle
            assert!((lhs[i] - (a[i] + b[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn mulaw_bounds() {
        let x = synth::speech_like(8, 4000);
        let y = apply_mulaw(&x, 60).unwrap();
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((a - b).abs() <= 1e-9);
        }
        let y = apply_mulaw(&x, 1).unwrap();
        let mut levels: Vec<f64> = y.samples().to_vec();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        assert!(levels.len() <= 2);

        // per-sample bound from the companding law: the error is at most the
        // expansion of the half-step cell around the compressed value
        let bits = 8;
        let half = 1.0 / (2f64.powi(bits) - 1.0);
        let y = apply_mulaw(&x, bits as u32).unwrap();
        for (&a, &b) in x.samples().iter().zip(y.samples()) {
            let c = mulaw_compress(a).abs();
            let bound = mulaw_expand((c + half).min(1.0)) - mulaw_expand((c - half).max(0.0));
            assert!((a - b).abs() <= bound + 1e-15);
        }
        assert!(apply_mulaw(&x, 0).is_err());
    }

    #[test]
    fn eq_cases() {
        let x = tone(200.0, 16000, 0.3);
        let same = apply_eq(&x, EqBand::Low, 0.0, EqMode::Cut).unwrap();
        for (a, b) in x.samples().iter().zip(same.samples()) {
            assert!((a - b).abs() < 1e-9);
        }
        let cut = apply_eq(&x, EqBand::Low, 1.0, EqMode::Cut).unwrap();
        let drop = 10.0 * (audio::energy(x.samples()) / audio::energy(cut.samples())).log10();
        assert!((drop - 24.0).abs() < 1.0, "{drop}");

        let s = synth::speech_like(3, 8000);
        let up = apply_eq(&s, EqBand::Mid, 0.6, EqMode::Boost).unwrap();
        let back = apply_eq(&up, EqBand::Mid, 0.6, EqMode::Cut).unwrap();
        for (a, b) in s.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn eq_mask_shape() {
        assert_eq!(EqBand::Low.mask(100.0), 1.0);
        assert_eq!(EqBand::Low.mask(600.0), 0.0);
        assert!((EqBand::Low.mask(500.0) - 0.5).abs() < 1e-12);
        assert_eq!(EqBand::High.mask(8000.0), 1.0);
        assert_eq!(EqBand::Mid.mask(1000.0), 1.0);
    }

    #[test]
    fn pops_counts() {
        let x = synth::speech_like(2, 40_000);
        let y = apply_pops(&x, 1.0, 77).unwrap();
        let diff = x
            .samples()
            .iter()
            .zip(y.samples())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(diff, 400);
        assert_eq!(y, apply_pops(&x, 1.0, 77).unwrap());
        let y = apply_pops(&x, 0.01, 3).unwrap();
        let diff = x
            .samples()
            .iter()
            .zip(y.samples())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(diff, 4);
        for (a, b) in x.samples().iter().zip(y.samples()) {
            if a != b {
                assert!((0.5..=1.0).contains(&b.abs()));
            }
        }
    }

    #[test]
    fn damage_nests_with_fraction() {
        let x = synth::speech_like(6, 20_000);
        let lo = apply_pops(&x, 0.5, 11).unwrap();
        let hi = apply_pops(&x, 2.0, 11).unwrap();
        for i in 0..x.len() {
            if lo.samples()[i] != x.samples()[i] {
                assert_eq!(lo.samples()[i], hi.samples()[i]);
            }
        }
        let lo = apply_dropouts(&x, 2.0, 11).unwrap();
        let hi = apply_dropouts(&x, 10.0, 11).unwrap();
        for i in 0..x.len() {
            if lo.samples()[i] == 0.0 && x.samples()[i] != 0.0 {
                assert_eq!(hi.samples()[i], 0.0);
            }
        }
    }

    #[test]
    fn dropout_counts() {
        let x = AudioBuffer::canonical(vec![0.25; 40_000]).unwrap();
        let y = apply_dropouts(&x, 20.0, 5).unwrap();
        let zeros = y.samples().iter().filter(|&&v| v == 0.0).count();
        assert!((zeros as f64 - 8000.0).abs() <= 160.0);
        assert_eq!(y, apply_dropouts(&x, 20.0, 5).unwrap());
        // zeroed runs are whole 160-sample segments
        let mut run = 0;
        for &v in y.samples() {
            if v == 0.0 {
                run += 1;
            } else {
                assert_eq!(run % 160, 0);
                run = 0;
            }
        }
    }

    #[test]
    fn codec_hook_paths() {
        let x = synth::speech_like(1, 4000);
        assert!(matches!(
            apply_external_codec(&x, 64.0, None),
            Err(Error::CodecNotConfigured)
        ));
        let copy = CodecHook::new("cp {in} {out}");
        let y = apply_external_codec(&x, 64.0, Some(&copy)).unwrap();
        for (a, b) in x.samples().iter().zip(y.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        let bad = CodecHook::new("false {in}");
        match apply_external_codec(&x, 64.0, Some(&bad)) {
            Err(Error::CodecFailed { command, .. }) => assert!(command.starts_with("false ")),
            other => panic!("{other:?}"),
        }
    }
}
