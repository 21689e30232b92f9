//! Perturbation space: random axes of combined degradations driven by a
//! single strength `rho` in `[0, 100]`.

mod griffin_lim;
mod kernels;
mod noise;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dsp::derive_seed;
use crate::error::{Error, Result};

pub use griffin_lim::{apply_griffin_lim, griffin_lim_logged, magnitude_error, GriffinLimRun};
pub use kernels::{
    apply_additive, apply_dropouts, apply_eq, apply_external_codec, apply_mulaw, apply_pops,
    apply_reverb, fraction_count, mulaw_compress, mulaw_expand, quantize_uniform, synth_ir,
    CodecHook, EqBand, EqMode, DROPOUT_SEGMENT_SECONDS, EQ_FULL_DEPTH_DB, MU_LAW,
};
pub use noise::NoiseBank;

pub const SNR_RANGE_DB: (f64, f64) = (2.0, 66.0);
pub const DRR_RANGE_DB: (f64, f64) = (-27.0, 65.0);
pub const RT60_RANGE_S: (f64, f64) = (0.05, 8.0);
pub const BITS_RANGE: (u32, u32) = (1, 60);
pub const BITRATE_RANGE_KBPS: (f64, f64) = (8.0, 320.0);
pub const POPS_RANGE_PCT: (f64, f64) = (0.01, 10.0);
pub const ITERATIONS_RANGE: (u32, u32) = (1, 500);
pub const DROPOUTS_RANGE_PCT: (f64, f64) = (0.01, 20.0);
pub const WEIGHT_RANGE: (f64, f64) = (0.5, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Additive,
    Reverb,
    Compression,
    Equalization,
    Miscellaneous,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Additive,
        Category::Reverb,
        Category::Compression,
        Category::Equalization,
        Category::Miscellaneous,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Strength-independent description of one step. Serialized as
/// `{"kind": ..., "params_template": {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params_template", rename_all = "snake_case")]
pub enum KindTemplate {
    Additive {},
    Reverb {},
    Mulaw {},
    ExternalCodec {},
    Eq { band: EqBand, mode: EqMode },
    Pops {},
    GriffinLim {},
    Dropouts {},
}

impl KindTemplate {
    pub fn category(&self) -> Category {
        match self {
            KindTemplate::Additive {} => Category::Additive,
            KindTemplate::Reverb {} => Category::Reverb,
            KindTemplate::Mulaw {} | KindTemplate::ExternalCodec {} => Category::Compression,
            KindTemplate::Eq { .. } => Category::Equalization,
            KindTemplate::Pops {} | KindTemplate::GriffinLim {} | KindTemplate::Dropouts {} => {
                Category::Miscellaneous
            }
        }
    }
}

/// Concrete kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationKind {
    Additive {
        snr_db: f64,
    },
    Reverb {
        drr_db: f64,
        rt60_s: f64,
    },
    Mulaw {
        bits: u32,
    },
    ExternalCodec {
        bitrate_kbps: f64,
    },
    Eq {
        band: EqBand,
        depth: f64,
        mode: EqMode,
    },
    Pops {
        fraction_pct: f64,
    },
    GriffinLim {
        iterations: u32,
    },
    Dropouts {
        fraction_pct: f64,
    },
}

impl PerturbationKind {
    /// True when every parameter lies inside its declared interval.
    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        match *self {
            PerturbationKind::Additive { snr_db } => within(snr_db, SNR_RANGE_DB),
            PerturbationKind::Reverb { drr_db, rt60_s } => {
                within(drr_db, DRR_RANGE_DB) && within(rt60_s, RT60_RANGE_S)
            }
            PerturbationKind::Mulaw { bits } => (BITS_RANGE.0..=BITS_RANGE.1).contains(&bits),
            PerturbationKind::ExternalCodec { bitrate_kbps } => {
                within(bitrate_kbps, BITRATE_RANGE_KBPS)
            }
            PerturbationKind::Eq { depth, .. } => within(depth, (0.0, 1.0)),
            PerturbationKind::Pops { fraction_pct } => within(fraction_pct, POPS_RANGE_PCT),
            PerturbationKind::GriffinLim { iterations } => {
                (ITERATIONS_RANGE.0..=ITERATIONS_RANGE.1).contains(&iterations)
            }
            PerturbationKind::Dropouts { fraction_pct } => within(fraction_pct, DROPOUTS_RANGE_PCT),
        }
    }
}

fn lerp(mild: f64, severe: f64, t: f64) -> f64 {
    mild + (severe - mild) * t
}

fn log_lerp(mild: f64, severe: f64, t: f64) -> f64 {
    (mild.ln() + (severe.ln() - mild.ln()) * t)
        .exp()
        .clamp(mild.min(severe), mild.max(severe))
}

/// Maps `rho * weight` onto the kind's parameter interval: `0` is the mildest
/// endpoint and `100` the most severe.
pub fn strength_to_params(template: &KindTemplate, rho: f64, weight: f64) -> PerturbationKind {
    let t = (rho * weight / 100.0).clamp(0.0, 1.0);
    match *template {
        KindTemplate::Additive {} => PerturbationKind::Additive {
            snr_db: lerp(SNR_RANGE_DB.1, SNR_RANGE_DB.0, t),
        },
        KindTemplate::Reverb {} => PerturbationKind::Reverb {
            drr_db: lerp(DRR_RANGE_DB.1, DRR_RANGE_DB.0, t),
            rt60_s: log_lerp(RT60_RANGE_S.0, RT60_RANGE_S.1, t),
        },
        KindTemplate::Mulaw {} => PerturbationKind::Mulaw {
            bits: lerp(BITS_RANGE.1 as f64, BITS_RANGE.0 as f64, t).round() as u32,
        },
        KindTemplate::ExternalCodec {} => PerturbationKind::ExternalCodec {
            bitrate_kbps: log_lerp(BITRATE_RANGE_KBPS.1, BITRATE_RANGE_KBPS.0, t),
        },
        KindTemplate::Eq { band, mode } => PerturbationKind::Eq {
            band,
            depth: t,
            mode,
        },
        KindTemplate::Pops {} => PerturbationKind::Pops {
            fraction_pct: log_lerp(POPS_RANGE_PCT.0, POPS_RANGE_PCT.1, t),
        },
        KindTemplate::GriffinLim {} => PerturbationKind::GriffinLim {
            iterations: (log_lerp(ITERATIONS_RANGE.1 as f64, ITERATIONS_RANGE.0 as f64, t).round()
                as u32)
                .clamp(ITERATIONS_RANGE.0, ITERATIONS_RANGE.1),
        },
        KindTemplate::Dropouts {} => PerturbationKind::Dropouts {
            fraction_pct: log_lerp(DROPOUTS_RANGE_PCT.0, DROPOUTS_RANGE_PCT.1, t),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisStep {
    pub category: Category,
    #[serde(flatten)]
    pub template: KindTemplate,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationAxis {
    pub seed: u64,
    pub steps: Vec<AxisStep>,
    pub noise_source: Option<String>,
}

impl PerturbationAxis {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            steps: Vec::new(),
            noise_source: None,
        }
    }

    /// Fixed axis used for "obviously different" sentinels: full-weight
    /// additive noise followed by dropouts.
    pub fn severe(seed: u64, noise_bank: &NoiseBank) -> Result<Self> {
        let noise = noise_bank.names().next().ok_or(Error::EmptyNoiseBank)?;
        Ok(Self {
            seed,
            steps: vec![
                AxisStep {
                    category: Category::Additive,
                    template: KindTemplate::Additive {},
                    weight: 1.0,
                },
                AxisStep {
                    category: Category::Miscellaneous,
                    template: KindTemplate::Dropouts {},
                    weight: 1.0,
                },
            ],
            noise_source: Some(noise.to_string()),
        })
    }

    /// Concrete parameters each step would run with at `rho`.
    pub fn params_at(&self, rho: f64) -> Vec<PerturbationKind> {
        self.steps
            .iter()
            .map(|s| strength_to_params(&s.template, rho, s.weight))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 5];
        for s in &self.steps {
            if s.template.category() != s.category {
                return Err(Error::InvalidParameter(format!(
                    "step kind {:?} does not belong to {:?}",
                    s.template, s.category
                )));
            }
            if std::mem::replace(&mut seen[s.category.index()], true) {
                return Err(Error::InvalidParameter(format!(
                    "category {:?} appears twice",
                    s.category
                )));
            }
            if !(s.weight > 0.0 && s.weight <= 1.0) {
                return Err(Error::InvalidParameter(format!("weight {}", s.weight)));
            }
            if s.category == Category::Additive && self.noise_source.is_none() {
                return Err(Error::InvalidParameter(
                    "additive step without noise source".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Draws an axis without the external codec kind.
pub fn draw_axis(seed: u64, noise_bank: &NoiseBank) -> Result<PerturbationAxis> {
    draw_axis_with(seed, noise_bank, false)
}

/// Draws 1 to 5 distinct categories in random order with ceiling weights
/// uniform in `[0.5, 1]`. The codec kind competes with mu-law only when
/// `codec_available`.
pub fn draw_axis_with(
    seed: u64,
    noise_bank: &NoiseBank,
    codec_available: bool,
) -> Result<PerturbationAxis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=Category::ALL.len());
    let mut cats = Category::ALL.to_vec();
    cats.shuffle(&mut rng);
    cats.truncate(n);

    let mut noise_source = None;
    let mut steps = Vec::with_capacity(n);
    for category in cats {
        let template = match category {
            Category::Additive => {
                let names: Vec<&str> = noise_bank.names().collect();
                let name = names.choose(&mut rng).ok_or(Error::EmptyNoiseBank)?;
                noise_source = Some(name.to_string());
                KindTemplate::Additive {}
            }
            Category::Reverb => KindTemplate::Reverb {},
            Category::Compression => {
                if codec_available && rng.random::<bool>() {
                    KindTemplate::ExternalCodec {}
                } else {
                    KindTemplate::Mulaw {}
                }
            }
            Category::Equalization => KindTemplate::Eq {
                band: *[EqBand::Low, EqBand::Mid, EqBand::High]
                    .choose(&mut rng)
                    .expect("non-empty"),
                mode: if rng.random::<bool>() {
                    EqMode::Boost
                } else {
                    EqMode::Cut
                },
            },
            Category::Miscellaneous => *[
                KindTemplate::Pops {},
                KindTemplate::GriffinLim {},
                KindTemplate::Dropouts {},
            ]
            .choose(&mut rng)
            .expect("non-empty"),
        };
        let weight = rng.random_range(WEIGHT_RANGE.0..=WEIGHT_RANGE.1);
        steps.push(AxisStep {
            category,
            template,
            weight,
        });
    }
    Ok(PerturbationAxis {
        seed,
        steps,
        noise_source,
    })
}

/// Resources the kernels need beyond the axis itself.
#[derive(Debug, Clone, Default)]
pub struct PerturbContext {
    pub noise_bank: NoiseBank,
    pub codec: Option<CodecHook>,
}

impl PerturbContext {
    pub fn builtin() -> Self {
        Self {
            noise_bank: NoiseBank::builtin(),
            codec: None,
        }
    }
}

/// `x_per = H(x, rho)`: runs each step in order at strength `rho * weight`,
/// clipping to `[-1, 1]` after every step. Randomness per step comes from
/// `(axis.seed, step index)` only, so the result is a pure function of
/// `(axis, rho, x)`.
pub fn apply_axis(
    axis: &PerturbationAxis,
    rho: f64,
    x: &AudioBuffer,
    ctx: &PerturbContext,
) -> Result<AudioBuffer> {
    x.ensure_canonical()?;
    if !(0.0..=100.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!(
            "rho {rho} outside [0, 100]"
        )));
    }
    let mut y = x.clone();
    for (i, step) in axis.steps.iter().enumerate() {
        let step_seed = derive_seed(axis.seed, i as u64);
        let kind = strength_to_params(&step.template, rho, step.weight);
        y = apply_kind(&kind, &y, step_seed, axis.noise_source.as_deref(), ctx)?.clipped();
    }
    Ok(y)
}

fn apply_kind(
    kind: &PerturbationKind,
    x: &AudioBuffer,
    seed: u64,
    noise_source: Option<&str>,
    ctx: &PerturbContext,
) -> Result<AudioBuffer> {
    match *kind {
        PerturbationKind::Additive { snr_db } => {
            let name = noise_source.ok_or_else(|| {
                Error::InvalidParameter("additive step without noise source".into())
            })?;
            let noise = ctx.noise_bank.get(name)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start = rng.random_range(0..noise.len().max(1));
            apply_additive(x, noise, snr_db, start)
        }
        PerturbationKind::Reverb { drr_db, rt60_s } => {
            let ir = synth_ir(drr_db, rt60_s, seed, x.sample_rate())?;
            apply_reverb(x, &ir)
        }
        PerturbationKind::Mulaw { bits } => apply_mulaw(x, bits),
        PerturbationKind::ExternalCodec { bitrate_kbps } => {
            apply_external_codec(x, bitrate_kbps, ctx.codec.as_ref())
        }
        PerturbationKind::Eq { band, depth, mode } => apply_eq(x, band, depth, mode),
        PerturbationKind::Pops { fraction_pct } => apply_pops(x, fraction_pct, seed),
        PerturbationKind::GriffinLim { iterations } => apply_griffin_lim(x, iterations),
        PerturbationKind::Dropouts { fraction_pct } => apply_dropouts(x, fraction_pct, seed),
    }
}
