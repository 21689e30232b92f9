//! Deterministic synthetic training corpus: one additive-noise axis, label
//! `h = [rho > 50]`, plus held-out pairs and a held-out rho grid.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dsp::derive_seed;
use crate::error::{Error, Result};
use crate::eval::spearman;
use crate::metric::{MetricModel, Scalar, TrainConfig, TrainMode, TrainPair};
use crate::perturb::{
    apply_axis, AxisStep, Category, KindTemplate, PerturbContext, PerturbationAxis,
};
use crate::synth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub seed: u64,
    pub train_refs: usize,
    pub pairs_per_ref: usize,
    pub held_out_refs: usize,
    pub held_out_pairs_per_ref: usize,
    pub grid_refs: usize,
    pub grid_step: f64,
    pub len: usize,
    pub noise: String,
    pub threshold: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: 7,
            train_refs: 125,
            pairs_per_ref: 16,
            held_out_refs: 25,
            held_out_pairs_per_ref: 8,
            grid_refs: 5,
            grid_step: 5.0,
            len: 1 << 14,
            noise: "pink".into(),
            threshold: 50.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyPair {
    pub rho: f64,
    pub pair: TrainPair,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub train: Vec<ToyPair>,
    pub held_out: Vec<ToyPair>,
    /// Held-out references, each perturbed at every grid strength.
    pub grid: Vec<ToyPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyScore {
    pub accuracy: f64,
    pub spearman: f64,
}

/// The corpus axis: additive noise at full weight.
pub fn toy_axis(seed: u64, noise: &str) -> PerturbationAxis {
    PerturbationAxis {
        seed,
        steps: vec![AxisStep {
            category: Category::Additive,
            template: KindTemplate::Additive {},
            weight: 1.0,
        }],
        noise_source: Some(noise.to_string()),
    }
}

impl ToyCorpus {
    pub fn generate(spec: &ToySpec, ctx: &PerturbContext) -> Result<Self> {
        if spec.train_refs == 0 || spec.pairs_per_ref == 0 || !(spec.grid_step > 0.0) {
            return Err(Error::InvalidParameter("empty toy corpus".into()));
        }
        ctx.noise_bank.get(&spec.noise)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let reference = |i: usize| -> Arc<AudioBuffer> {
            Arc::new(synth::speech_like(
                derive_seed(spec.seed, i as u64),
                spec.len,
            ))
        };
        let mut draw = |refs: std::ops::Range<usize>, per_ref: usize| -> Result<Vec<ToyPair>> {
            let mut out = Vec::with_capacity(refs.len() * per_ref);
            for i in refs {
                let x = reference(i);
                for _ in 0..per_ref {
                    let rho: f64 = rng.random_range(0.0..=100.0);
                    out.push(perturbed(spec, ctx, &x, rho, rng.random())?);
                }
            }
            Ok(out)
        };
        let train = draw(0..spec.train_refs, spec.pairs_per_ref)?;
        let first_held = spec.train_refs;
        let held_out = draw(
            first_held..first_held + spec.held_out_refs,
            spec.held_out_pairs_per_ref,
        )?;
        let mut grid = Vec::new();
        let steps = (100.0 / spec.grid_step).floor() as usize;
        for i in first_held..first_held + spec.grid_refs {
            let x = reference(i);
            let axis_seed = derive_seed(spec.seed ^ 0x6772_6964, i as u64);
            for k in 0..=steps {
                grid.push(perturbed(
                    spec,
                    ctx,
                    &x,
                    k as f64 * spec.grid_step,
                    axis_seed,
                )?);
            }
        }
        Ok(Self {
            train,
            held_out,
            grid,
        })
    }

    pub fn train_pairs(&self) -> Vec<TrainPair> {
        self.train.iter().map(|p| p.pair.clone()).collect()
    }
}

fn perturbed(
    spec: &ToySpec,
    ctx: &PerturbContext,
    x: &Arc<AudioBuffer>,
    rho: f64,
    axis_seed: u64,
) -> Result<ToyPair> {
    let y = apply_axis(&toy_axis(axis_seed, &spec.noise), rho, x, ctx)?;
    Ok(ToyPair {
        rho,
        pair: TrainPair {
            reference: x.clone(),
            perturbed: Arc::new(y),
            h: u8::from(rho > spec.threshold),
        },
    })
}

/// Scratch training setup for the toy corpus: no silence augmentation and
/// four references per batch.
pub fn train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        mode: TrainMode::Scratch,
        augment_silence: false,
        refs_per_batch: Some(4),
        ..Default::default()
    }
}

/// Held-out accuracy of `predict(D) > 1/2` against `h`, and Spearman
/// correlation of rho with `D` over the grid.
pub fn score<S: Scalar + Send + Sync>(
    model: &MetricModel<S>,
    corpus: &ToyCorpus,
) -> Result<ToyScore> {
    use rayon::prelude::*;
    let distances = |pairs: &[ToyPair]| -> Result<Vec<f64>> {
        pairs
            .par_iter()
            .map(|p| model.distance(&p.pair.reference, &p.pair.perturbed))
            .collect()
    };
    if corpus.held_out.is_empty() || corpus.grid.len() < 2 {
        return Err(Error::EmptyInput("toy held-out set"));
    }
    let d = distances(&corpus.held_out)?;
    let hits = corpus
        .held_out
        .iter()
        .zip(&d)
        .filter(|(p, &d)| u8::from(model.predict(d) > 0.5) == p.pair.h)
        .count();
    let grid_d = distances(&corpus.grid)?;
    let rho: Vec<f64> = corpus.grid.iter().map(|p| p.rho).collect();
    Ok(ToyScore {
        accuracy: hits as f64 / corpus.held_out.len() as f64,
        spearman: spearman(&rho, &grid_d)?,
    })
}
