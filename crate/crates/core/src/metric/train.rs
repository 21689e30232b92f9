//! Training loops: BCE on judgment triplets in lin/fin/scratch modes, and
//! surrogate category pretraining for the backbone.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{bce, bce_logit_grad, MetricModel, Pass, Tape};
use super::pool::Pool;
use super::scalar::Scalar;
use crate::audio::{pad_silence, AudioBuffer, PadSide};
use crate::dataset::SILENCE_PAD_SECONDS;
use crate::dsp::derive_seed;
use crate::error::{Error, Result};
use crate::perturb::{apply_axis, draw_axis, Category, PerturbContext, PerturbationAxis};
use crate::reference::ReferencePool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pre,
    Lin,
    Fin,
    Scratch,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Self::Pre),
            "lin" => Ok(Self::Lin),
            "fin" => Ok(Self::Fin),
            "scratch" => Ok(Self::Scratch),
            other => Err(Error::InvalidParameter(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub augment_silence: bool,
    /// When set, each batch is drawn from this many references so that
    /// shared references are forwarded once.
    pub refs_per_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            mode: TrainMode::Scratch,
            augment_silence: true,
            refs_per_batch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || self.batch_size == 0
            || self.epochs == 0
            || self.refs_per_batch == Some(0)
        {
            return Err(Error::InvalidParameter(
                "learning rate, batch size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One judgment: `h = 1` means "different". Pairs that share a reference
/// should share the `Arc` so batches can forward it once.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub reference: Arc<AudioBuffer>,
    pub perturbed: Arc<AudioBuffer>,
    pub h: u8,
}

impl TrainPair {
    pub fn new(reference: AudioBuffer, perturbed: AudioBuffer, h: u8) -> Self {
        Self {
            reference: Arc::new(reference),
            perturbed: Arc::new(perturbed),
            h,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<S>,
    v: Vec<S>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            t: 0,
        }
    }

    /// Updates `params[i]` for every `i` in `ranges`.
    pub fn step(&mut self, params: &mut [S], grads: &[S], ranges: &[std::ops::Range<usize>]) {
        self.t += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let one = S::one();
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let lr = S::of(self.lr * c2.sqrt() / c1);
        let eps = S::of(self.eps * c2.sqrt());
        for r in ranges {
            for i in r.clone() {
                let g = grads[i];
                self.m[i] = b1 * self.m[i] + (one - b1) * g;
                self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
                params[i] -= lr * self.m[i] / (self.v[i].sqrt() + eps);
            }
        }
    }
}

pub struct Trainer<S: Scalar> {
    pub model: MetricModel<S>,
    pub config: TrainConfig,
    adam: Adam<S>,
    rng: ChaCha8Rng,
    pool: Pool<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: MetricModel<S>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.mode == TrainMode::Pre {
            return Err(Error::InvalidParameter(
                "pre mode trains through pretrain_surrogate".into(),
            ));
        }
        let adam = Adam::new(model.params.len(), config.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7472_6169));
        Ok(Self {
            model,
            config,
            adam,
            rng,
            pool: Pool::default(),
        })
    }

    fn trainable(&self) -> Vec<std::ops::Range<usize>> {
        let h = self.model.head_index();
        let head = h..h + 2;
        match self.config.mode {
            TrainMode::Lin => vec![self.model.channel_weight_range(), head],
            _ => vec![0..self.model.params.len()],
        }
    }

    /// Padded copies when augmentation fires; `None` keeps the shared buffer.
    fn augment(&mut self) -> (Option<PadSide>, Option<PadSide>) {
        if !self.config.augment_silence {
            return (None, None);
        }
        let side = if self.rng.random::<bool>() {
            PadSide::Front
        } else {
            PadSide::Back
        };
        if self.rng.random::<bool>() {
            (Some(side), None)
        } else {
            (None, Some(side))
        }
    }

    /// One optimizer step on `batch`; returns the mean loss before the update.
    /// A reference shared by several pairs (and not padded by augmentation)
    /// enters the batch once, so batch-norm statistics are taken over the
    /// distinct signals.
    pub fn train_step(&mut self, batch: &[TrainPair]) -> Result<f64> {
        let (loss, grads, tape) = self.loss_and_grads(batch)?;
        if self.config.mode != TrainMode::Lin {
            self.model.update_running(&tape);
        }
        self.pool.recycle(tape);
        let ranges = self.trainable();
        self.adam.step(&mut self.model.params, &grads, &ranges);
        self.pool.put(grads);
        project(&mut self.model);
        Ok(loss)
    }

    fn loss_and_grads(&mut self, batch: &[TrainPair]) -> Result<(f64, Vec<S>, Tape<S>)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        let mut signals: Vec<Arc<AudioBuffer>> = Vec::with_capacity(2 * batch.len());
        let mut shared: Vec<(&Arc<AudioBuffer>, usize)> = Vec::new();
        let mut slots = Vec::with_capacity(batch.len());
        for pair in batch {
            if pair.h > 1 {
                return Err(Error::InvalidParameter(format!("label {}", pair.h)));
            }
            pair.reference.ensure_canonical()?;
            pair.perturbed.ensure_canonical()?;
            if pair.reference.is_empty() || pair.perturbed.is_empty() {
                return Err(Error::Shape("empty signal in batch".into()));
            }
            let (pad_ref, pad_per) = self.augment();
            let r = match pad_ref {
                Some(side) => {
                    signals.push(Arc::new(pad_silence(
                        &pair.reference,
                        SILENCE_PAD_SECONDS,
                        side,
                    )?));
                    signals.len() - 1
                }
                None => match shared.iter().find(|(x, _)| same_audio(x, &pair.reference)) {
                    Some(&(_, slot)) => slot,
                    None => {
                        signals.push(pair.reference.clone());
                        shared.push((&pair.reference, signals.len() - 1));
                        signals.len() - 1
                    }
                },
            };
            signals.push(match pad_per {
                Some(side) => Arc::new(pad_silence(&pair.perturbed, SILENCE_PAD_SECONDS, side)?),
                None => pair.perturbed.clone(),
            });
            slots.push((r, signals.len() - 1));
        }
        let views: Vec<&[f64]> = signals.iter().map(|s| s.samples()).collect();
        let model = &self.model;
        let (input, t0) = model.pack(&views)?;
        let lin = self.config.mode == TrainMode::Lin;
        let pass = Pass {
            batch_stats: !lin,
            dropout_seed: None,
        };
        let pool = &mut self.pool;
        let tape = model.forward_batch(&input, views.len(), t0, pass, pool);

        let (a, b) = model.head();
        let head = model.head_index();
        let mut grads = pool.zeroed(model.params.len());
        // every row is overwritten below
        let mut d_acts: Vec<Vec<S>> = tape.acts.iter().map(|x| pool.dirty(x.len())).collect();
        let n = batch.len() as f64;
        let mut total = 0.0;
        let cw = model.channel_weight_range();
        let mut dw = vec![0.0; cw.len()];
        let mut filled = vec![false; views.len()];
        for (pair, &(r, p)) in batch.iter().zip(&slots) {
            let d = model.tape_distance_dir(&tape, r, p, &mut d_acts, &mut dw);
            let logit = a * d + b;
            let prob = 1.0 / (1.0 + (-logit).exp());
            total += bce(prob, pair.h);
            let g = bce_logit_grad(prob, pair.h) / n;
            grads[head] += S::of(g * d);
            grads[head + 1] += S::of(g);
            for (gr, v) in grads[cw.clone()].iter_mut().zip(&dw) {
                *gr += S::of(g * a * v);
            }
            if !lin {
                model.settle_pair(&tape, &mut d_acts, r, p, S::of(g * a), filled[r]);
                filled[r] = true;
            }
        }
        if lin {
            d_acts.into_iter().for_each(|d| pool.put(d));
        } else {
            model.backward(&tape, &input, d_acts, Some(&mut grads), false, pool);
        }
        Ok((total / n, grads, tape))
    }

    /// Pair order for one epoch. Plain shuffle, or with `refs_per_batch`,
    /// runs of `batch_size / refs_per_batch` pairs sharing a reference.
    fn epoch_order(&mut self, pairs: &[TrainPair]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let Some(k) = self.config.refs_per_batch else {
            order.shuffle(&mut self.rng);
            return order;
        };
        let run = (self.config.batch_size / k).max(1);
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut index: HashMap<*const AudioBuffer, usize> = HashMap::new();
        for (i, pair) in pairs.iter().enumerate() {
            let g = *index
                .entry(Arc::as_ptr(&pair.reference))
                .or_insert_with(|| {
                    groups.push(Vec::new());
                    groups.len() - 1
                });
            groups[g].push(i);
        }
        let mut runs: Vec<Vec<usize>> = Vec::new();
        for mut g in groups {
            g.shuffle(&mut self.rng);
            runs.extend(g.chunks(run).map(<[usize]>::to_vec));
        }
        runs.shuffle(&mut self.rng);
        runs.concat()
    }

    /// Shuffled mini-batch epochs; `on_epoch` sees each epoch's mean loss.
    pub fn fit(
        &mut self,
        pairs: &[TrainPair],
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("training corpus"));
        }
        let mut out = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let order = self.epoch_order(pairs);
            let mut sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<TrainPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
                sum += self.train_step(&batch)? * batch.len() as f64;
            }
            let stats = EpochStats {
                epoch,
                mean_loss: sum / pairs.len() as f64,
            };
            on_epoch(&stats);
            out.push(stats);
        }
        Ok(out)
    }

    pub fn into_model(self) -> MetricModel<S> {
        self.model
    }
}

fn same_audio(a: &Arc<AudioBuffer>, b: &Arc<AudioBuffer>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Clamps channel weights and the head slope to be non-negative.
pub fn project<S: Scalar>(model: &mut MetricModel<S>) {
    let r = model.channel_weight_range();
    for w in &mut model.params[r] {
        if *w < S::zero() {
            *w = S::zero();
        }
    }
    let h = model.head_index();
    if model.params[h] < S::zero() {
        model.params[h] = S::zero();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub audio: AudioBuffer,
    pub label: Option<Category>,
}

/// Clips perturbed along a single random category at strength 60 to 100,
/// labelled by that category. Categories cycle so the classes stay balanced.
pub fn surrogate_corpus(
    refs: &ReferencePool,
    ctx: &PerturbContext,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledClip>> {
    if refs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ids = refs.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut axis_seed = derive_seed(seed, 1);
    for i in 0..n {
        let want = Category::ALL[i % Category::ALL.len()];
        let axis = loop {
            axis_seed = derive_seed(axis_seed, 1);
            let drawn = draw_axis(axis_seed, &ctx.noise_bank)?;
            if let Some(step) = drawn.steps.iter().find(|s| s.category == want) {
                let mut step = *step;
                step.weight = 1.0;
                break PerturbationAxis {
                    seed: drawn.seed,
                    steps: vec![step],
                    noise_source: drawn.noise_source.filter(|_| want == Category::Additive),
                };
            }
        };
        let reference = refs.get(ids[rng.random_range(0..ids.len())])?;
        let rho = rng.random_range(60.0..=100.0);
        out.push(LabeledClip {
            audio: apply_axis(&axis, rho, reference, ctx)?,
            label: Some(want),
        });
    }
    Ok(out)
}

/// Temporary linear head over per-channel time-means of every layer.
#[derive(Debug, Clone)]
pub struct SurrogateHead<S> {
    pub dims: usize,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

const CLASSES: usize = 5;

impl<S: Scalar> MetricModel<S> {
    /// Per-channel means over time for each signal of a tape, concatenated
    /// across layers.
    fn pooled(&self, tape: &super::net::Tape<S>) -> Vec<Vec<f64>> {
        let chans = self.layer_channels();
        (0..tape.n)
            .map(|s| {
                let mut v = Vec::with_capacity(chans.iter().sum());
                for (l, a) in tape.acts.iter().enumerate() {
                    let (co, t) = (chans[l], tape.lens[l + 1]);
                    for c in 0..co {
                        let row = &a[(c * tape.n + s) * t..(c * tape.n + s + 1) * t];
                        v.push(row.iter().map(|x| x.f64()).sum::<f64>() / t as f64);
                    }
                }
                v
            })
            .collect()
    }

    fn logits(head: &SurrogateHead<S>, pooled: &[f64]) -> [f64; CLASSES] {
        let mut z = [0.0; CLASSES];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = head.bias[k].f64()
                + head.weights[k * head.dims..(k + 1) * head.dims]
                    .iter()
                    .zip(pooled)
                    .map(|(w, x)| w.f64() * x)
                    .sum::<f64>();
        }
        z
    }

    /// Predicted category index per clip, eval mode.
    pub fn surrogate_predict(
        &self,
        head: &SurrogateHead<S>,
        clips: &[&AudioBuffer],
    ) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(clips.len());
        let mut pool = Pool::default();
        for clip in clips {
            let (input, t0) = self.pack(&[clip.samples()])?;
            let tape = self.forward_batch(&input, 1, t0, Pass::EVAL, &mut pool);
            let z = Self::logits(head, &self.pooled(&tape)[0]);
            pool.recycle(tape);
            let best = (0..CLASSES)
                .max_by(|&i, &j| z[i].total_cmp(&z[j]))
                .expect("non-empty");
            out.push(best);
        }
        Ok(out)
    }
}

fn softmax(z: &[f64; CLASSES]) -> [f64; CLASSES] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = z.map(|v| (v - m).exp());
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

/// Trains the backbone with dropout on a 5-way category task. Channel
/// weights and the distance head are left as they were. Returns the model
/// with the temporary head so callers can measure held-out accuracy.
pub fn pretrain_surrogate_with_head<S: Scalar>(
    mut model: MetricModel<S>,
    corpus: &[LabeledClip],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(MetricModel<S>, SurrogateHead<S>)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let labels: Vec<usize> = corpus
        .iter()
        .map(|c| c.label.map(|l| l.index()).ok_or(Error::MissingLabels))
        .collect::<Result<_>>()?;
    let dims: usize = model.layer_channels().iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7072_6500));
    let bound = (1.0 / dims as f64).sqrt();
    let mut head = SurrogateHead {
        dims,
        weights: (0..CLASSES * dims)
            .map(|_| S::of(rng.random_range(-bound..bound)))
            .collect(),
        bias: vec![S::zero(); CLASSES],
    };
    let backbone = model.backbone_range();
    let mut adam = Adam::<S>::new(model.params.len(), config.learning_rate);
    let mut head_params: Vec<S> = head.weights.iter().chain(&head.bias).copied().collect();
    let mut head_adam = Adam::<S>::new(head_params.len(), config.learning_rate);
    let chans = model.layer_channels();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0u64;
    let mut pool = Pool::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let views: Vec<&[f64]> = chunk.iter().map(|&i| corpus[i].audio.samples()).collect();
            let (input, t0) = model.pack(&views)?;
            let pass = Pass {
                batch_stats: true,
                dropout_seed: Some(derive_seed(config.seed, step)),
            };
            step += 1;
            let tape = model.forward_batch(&input, views.len(), t0, pass, &mut pool);
            let pooled = model.pooled(&tape);
            let n = chunk.len() as f64;
            let mut head_grad = vec![S::zero(); head_params.len()];
            let mut d_acts: Vec<Vec<S>> = tape.acts.iter().map(|a| pool.zeroed(a.len())).collect();
            for (s, &i) in chunk.iter().enumerate() {
                let mut p = softmax(&MetricModel::<S>::logits(&head, &pooled[s]));
                total -= p[labels[i]].max(1e-300).ln();
                p[labels[i]] -= 1.0;
                let mut d_pool = vec![0.0; dims];
                for k in 0..CLASSES {
                    let g = p[k] / n;
                    head_grad[CLASSES * dims + k] += S::of(g);
                    for j in 0..dims {
                        head_grad[k * dims + j] += S::of(g * pooled[s][j]);
                        d_pool[j] += g * head.weights[k * dims + j].f64();
                    }
                }
                let mut j = 0;
                for (l, d) in d_acts.iter_mut().enumerate() {
                    let (co, t) = (chans[l], tape.lens[l + 1]);
                    for c in 0..co {
                        let g = S::of(d_pool[j] / t as f64);
                        for v in &mut d[(c * tape.n + s) * t..(c * tape.n + s + 1) * t] {
                            *v = g;
                        }
                        j += 1;
                    }
                }
            }
            let mut grads = vec![S::zero(); model.params.len()];
            model.backward(&tape, &input, d_acts, Some(&mut grads), false, &mut pool);
            model.update_running(&tape);
            pool.recycle(tape);
            adam.step(&mut model.params, &grads, std::slice::from_ref(&backbone));
            let all = 0..head_params.len();
            head_adam.step(&mut head_params, &head_grad, &[all]);
            head.weights.copy_from_slice(&head_params[..CLASSES * dims]);
            head.bias.copy_from_slice(&head_params[CLASSES * dims..]);
        }
        on_epoch(&EpochStats {
            epoch,
            mean_loss: total / corpus.len() as f64,
        });
    }
    Ok((model, head))
}

/// Surrogate pretraining with the temporary head discarded.
pub fn pretrain_surrogate<S: Scalar>(
    model: MetricModel<S>,
    corpus: &[LabeledClip],
    config: &TrainConfig,
) -> Result<MetricModel<S>> {
    pretrain_surrogate_with_head(model, corpus, config, |_| {}).map(|(m, _)| m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub output: AudioBuffer,
    pub trace: Vec<f64>,
}

/// Gradient descent on the input: `y <- y - step_size * dD(x_clean, y)/dy`
/// from `y = x_noisy`. `trace[k]` is the distance before step `k`, plus the
/// final distance.
pub fn invert_demo<S: Scalar>(
    model: &MetricModel<S>,
    x_clean: &AudioBuffer,
    x_noisy: &AudioBuffer,
    steps: usize,
    step_size: f64,
) -> Result<InversionResult> {
    if !(step_size > 0.0) {
        return Err(Error::InvalidParameter(format!("step size {step_size}")));
    }
    let initial = model.distance(x_clean, x_noisy)?;
    let mut trace = vec![initial];
    let mut y = x_noisy.clone();
    for step in 0..steps {
        let g = model.grad_input(x_clean, &y)?;
        let next: Vec<f64> = y
            .samples()
            .iter()
            .zip(&g)
            .map(|(v, d)| v - step_size * d)
            .collect();
        y = y.with_samples(next)?;
        let d = model.distance(x_clean, &y)?;
        trace.push(d);
        if d > 10.0 * initial && initial > 0.0 {
            return Err(Error::Divergence {
                step,
                distance: d,
                initial,
            });
        }
    }
    Ok(InversionResult { output: y, trace })
}
