//! 1-D convolutional feature extractor, deep-feature distance and the
//! calibration head, with hand-written backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pool::Pool;
use super::scalar::{dot_f64, gemm, sq_dev_f64, sum_f64, Scalar, View};
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub n_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub base_channels: usize,
    pub channel_double_every: usize,
    pub leaky_slope: f64,
    pub dropout_p: f64,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub min_input_len: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_layers: 14,
            kernel: 3,
            stride: 2,
            base_channels: 32,
            channel_double_every: 5,
            leaky_slope: 0.2,
            dropout_p: 0.1,
            batch_norm: true,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            min_input_len: 1 << 14,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel != 3 || self.stride != 2 {
            return Err(Error::InvalidParameter(
                "only kernel 3, stride 2 convolutions are supported".into(),
            ));
        }
        if self.n_layers == 0 || self.base_channels == 0 || self.channel_double_every == 0 {
            return Err(Error::InvalidParameter("empty network".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidParameter(
                "dropout/momentum out of range".into(),
            ));
        }
        Ok(())
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.base_channels << (layer / self.channel_double_every)
    }

    /// Input samples that influence one output of the last layer:
    /// `1 + (k - 1) * (s^L - 1) / (s - 1)`.
    pub fn receptive_field(&self) -> usize {
        let growth: usize = (0..self.n_layers).map(|l| self.stride.pow(l as u32)).sum();
        1 + (self.kernel - 1) * growth
    }

    /// Time lengths `T_0..=T_L` for an input of `t0` samples.
    pub fn lengths(&self, t0: usize) -> Vec<usize> {
        let mut out = vec![t0];
        for _ in 0..self.n_layers {
            let t = *out.last().expect("non-empty");
            out.push(t.div_ceil(self.stride));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerLayout {
    pub c_in: usize,
    pub c_out: usize,
    pub w: usize,
    pub b: usize,
    pub gamma: usize,
    pub beta: usize,
}

/// Offsets of every tensor inside the flat parameter vector. Backbone
/// tensors come first, then channel weights, then the head `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub layers: Vec<LayerLayout>,
    pub cw: Vec<usize>,
    pub head: usize,
    pub backbone_end: usize,
    pub total: usize,
}

impl Layout {
    fn new(config: &NetConfig) -> Self {
        let mut off = 0;
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut c_in = 1;
        for l in 0..config.n_layers {
            let c_out = config.channels(l);
            let w = off;
            off += 3 * c_out * c_in;
            let b = off;
            off += c_out;
            let gamma = off;
            off += c_out;
            let beta = off;
            off += c_out;
            layers.push(LayerLayout {
                c_in,
                c_out,
                w,
                b,
                gamma,
                beta,
            });
            c_in = c_out;
        }
        let backbone_end = off;
        let cw = layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.c_out;
                o
            })
            .collect();
        let head = off;
        off += 2;
        Self {
            layers,
            cw,
            head,
            backbone_end,
            total: off,
        }
    }

    pub fn channel_weight_range(&self) -> std::ops::Range<usize> {
        self.backbone_end..self.head
    }
}

/// Activations `F_l` of one signal, channel-major `(C_l, T_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct MetricModel<S: Scalar> {
    pub config: NetConfig,
    pub(crate) layout: Layout,
    pub params: Vec<S>,
    pub running_mean: Vec<Vec<S>>,
    pub running_var: Vec<Vec<S>>,
}

/// How a batch is pushed through the network.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pass {
    pub batch_stats: bool,
    pub dropout_seed: Option<u64>,
}

impl Pass {
    pub const EVAL: Pass = Pass {
        batch_stats: false,
        dropout_seed: None,
    };
}

pub(crate) struct LayerTape<S> {
    pub xhat: Vec<S>,
    pub invstd: Vec<S>,
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub mask: Option<Vec<S>>,
}

/// Forward activations plus what backpropagation needs.
pub(crate) struct Tape<S> {
    pub n: usize,
    pub lens: Vec<usize>,
    pub acts: Vec<Vec<S>>,
    pub layers: Vec<LayerTape<S>>,
    pub batch_stats: bool,
}

/// Output `t` of a stride-2, pad-1 convolution reads input `2t + k - 1`.
/// Returns the valid output range `[t0, t1)` for tap `k`.
fn tap_range(k: usize, t_in: usize, t_out: usize) -> (usize, usize) {
    let t0 = usize::from(k == 0);
    let t1 = if k > t_in {
        0
    } else {
        ((t_in - k) / 2 + 1).min(t_out)
    };
    (t0, t1.max(t0))
}

/// Output columns per unfolded block; keeps the block cache-resident.
const BLOCK: usize = 1024;

/// `(sample, t0, t1)` blocks covering every output position.
fn blocks(n: usize, t_out: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..n).flat_map(move |s| {
        (0..t_out)
            .step_by(BLOCK)
            .map(move |t0| (s, t0, (t0 + BLOCK).min(t_out)))
    })
}

/// Unfolds outputs `[t0, t1)` of sample `s` from `x` of shape
/// `(ci, n, t_in)` into `col` of shape `(3 ci, t1 - t0)`, row `k ci + c`
/// holding tap `k` of channel `c`.
#[allow(clippy::too_many_arguments)]
fn im2col_block<S: Scalar>(
    x: &[S],
    ci: usize,
    n: usize,
    t_in: usize,
    t_out: usize,
    (s, t0, t1): (usize, usize, usize),
    col: &mut [S],
) {
    let cols = t1 - t0;
    for k in 0..3 {
        let (ta, tb) = tap_range(k, t_in, t_out);
        let a = ta.max(t0).min(t1);
        let b = tb.min(t1).max(a);
        for c in 0..ci {
            let src = &x[(c * n + s) * t_in..][..t_in];
            let dst = &mut col[(k * ci + c) * cols..][..cols];
            dst[..a - t0].fill(S::zero());
            dst[b - t0..].fill(S::zero());
            if b > a {
                let taps = src[2 * a + k - 1..].iter().step_by(2);
                for (d, v) in dst[a - t0..b - t0].iter_mut().zip(taps) {
                    *d = *v;
                }
            }
        }
    }
}

/// Adjoint of [`im2col_block`]: scatters `col` back, adding into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im_block_add<S: Scalar>(
    col: &[S],
    ci: usize,
    n: usize,
    t_in: usize,
    t_out: usize,
    (s, t0, t1): (usize, usize, usize),
    dx: &mut [S],
) {
    let cols = t1 - t0;
    for k in 0..3 {
        let (ta, tb) = tap_range(k, t_in, t_out);
        let a = ta.max(t0).min(t1);
        let b = tb.min(t1).max(a);
        if b == a {
            continue;
        }
        for c in 0..ci {
            let dst = &mut dx[(c * n + s) * t_in..][..t_in];
            let src = &col[(k * ci + c) * cols..][..cols];
            let taps = dst[2 * a + k - 1..].iter_mut().step_by(2);
            for (d, v) in taps.zip(&src[a - t0..b - t0]) {
                *d += *v;
            }
        }
    }
}

/// Multiplies `dz` by the leaky-ReLU derivative at `g * xh + b` and returns
/// `(sum dz, sum dz * xh)` of the result.
fn leaky_back<S: Scalar>(dz: &mut [S], xh: &[S], g: S, b: S, slope: S) -> (f64, f64) {
    const LANES: usize = 16;
    let (pos, neg) = (S::one(), slope);
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for (cd, cx) in dz.chunks_mut(1024).zip(xh.chunks(1024)) {
        let mut a1 = [S::zero(); LANES];
        let mut a2 = [S::zero(); LANES];
        for (gd, gx) in cd.chunks_mut(LANES).zip(cx.chunks(LANES)) {
            if let (Ok(gd), Ok(gx)) = (
                <&mut [S; LANES]>::try_from(&mut *gd),
                <&[S; LANES]>::try_from(gx),
            ) {
                for l in 0..LANES {
                    let f = if g * gx[l] + b > S::zero() { pos } else { neg };
                    let d = gd[l] * f;
                    gd[l] = d;
                    a1[l] += d;
                    a2[l] += d * gx[l];
                }
            } else {
                for (d, x) in gd.iter_mut().zip(gx) {
                    let f = if g * *x + b > S::zero() { pos } else { neg };
                    *d *= f;
                    a1[0] += *d;
                    a2[0] += *d * *x;
                }
            }
        }
        s1 += a1.iter().map(|v| v.f64()).sum::<f64>();
        s2 += a2.iter().map(|v| v.f64()).sum::<f64>();
    }
    (s1, s2)
}

fn l1_distance<S: Scalar>(x: &[S], y: &[S]) -> S {
    x.iter().zip(y).map(|(p, q)| (*p - *q).abs()).sum()
}

/// Two disjoint rows of length `t` starting at `i` and `j`.
fn pair_rows<S>(d: &mut [S], i: usize, j: usize, t: usize) -> (&mut [S], &mut [S]) {
    if i < j {
        let (lo, hi) = d.split_at_mut(j);
        (&mut lo[i..i + t], &mut hi[..t])
    } else {
        let (lo, hi) = d.split_at_mut(i);
        let (b, a) = (&mut lo[j..j + t], &mut hi[..t]);
        (a, b)
    }
}

pub fn leaky<S: Scalar>(y: S, slope: S) -> S {
    if y > S::zero() {
        y
    } else {
        y * slope
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with the probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(p: f64, h: u8) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    if h == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `d bce / d logit` for `p = sigmoid(logit)`; zero where the clamp is active.
pub fn bce_logit_grad(p: f64, h: u8) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
        return 0.0;
    }
    p - h as f64
}

impl<S: Scalar> MetricModel<S> {
    /// He-style uniform conv weights, zero biases, unit BN affine, unit
    /// channel weights and head `a = 1, b = 0`.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![S::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = 2.0 / (1.0 + config.leaky_slope * config.leaky_slope);
        for l in &layout.layers {
            let fan_in = (3 * l.c_in) as f64;
            let bound = (3.0 * gain / fan_in).sqrt();
            for p in &mut params[l.w..l.w + 3 * l.c_in * l.c_out] {
                *p = S::of(rng.random_range(-bound..bound));
            }
            for p in &mut params[l.gamma..l.gamma + l.c_out] {
                *p = S::one();
            }
        }
        for p in &mut params[layout.channel_weight_range()] {
            *p = S::one();
        }
        params[layout.head] = S::one();
        let running_mean = layout
            .layers
            .iter()
            .map(|l| vec![S::zero(); l.c_out])
            .collect();
        let running_var = layout
            .layers
            .iter()
            .map(|l| vec![S::one(); l.c_out])
            .collect();
        Ok(Self {
            config,
            layout,
            params,
            running_mean,
            running_var,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        self.layout.layers.iter().map(|l| l.c_out).collect()
    }

    pub fn channel_weights(&self, layer: usize) -> &[S] {
        let o = self.layout.cw[layer];
        &self.params[o..o + self.layout.layers[layer].c_out]
    }

    pub fn channel_weights_mut(&mut self, layer: usize) -> &mut [S] {
        let o = self.layout.cw[layer];
        let n = self.layout.layers[layer].c_out;
        &mut self.params[o..o + n]
    }

    pub fn all_channel_weights(&self) -> &[S] {
        &self.params[self.layout.channel_weight_range()]
    }

    pub fn head(&self) -> (f64, f64) {
        (
            self.params[self.layout.head].f64(),
            self.params[self.layout.head + 1].f64(),
        )
    }

    pub fn set_head(&mut self, a: f64, b: f64) {
        self.params[self.layout.head] = S::of(a);
        self.params[self.layout.head + 1] = S::of(b);
    }

    pub(crate) fn backbone_range(&self) -> std::ops::Range<usize> {
        0..self.layout.backbone_end
    }

    pub(crate) fn channel_weight_range(&self) -> std::ops::Range<usize> {
        self.layout.channel_weight_range()
    }

    pub(crate) fn head_index(&self) -> usize {
        self.layout.head
    }

    /// sha256 over conv/BN parameters and running statistics.
    pub fn backbone_checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.params[self.backbone_range()] {
            h.update(v.f64().to_le_bytes());
        }
        for v in self.running_mean.iter().chain(&self.running_var).flatten() {
            h.update(v.f64().to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// sha256 over every parameter and running statistic.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.params {
            h.update(v.f64().to_le_bytes());
        }
        for v in self.running_mean.iter().chain(&self.running_var).flatten() {
            h.update(v.f64().to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Same model in another precision.
    pub fn cast<T: Scalar>(&self) -> MetricModel<T> {
        let conv = |v: &Vec<S>| v.iter().map(|x| T::of(x.f64())).collect::<Vec<T>>();
        MetricModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: conv(&self.params),
            running_mean: self.running_mean.iter().map(conv).collect(),
            running_var: self.running_var.iter().map(conv).collect(),
        }
    }

    pub(crate) fn from_parts(
        config: NetConfig,
        params: Vec<S>,
        running_mean: Vec<Vec<S>>,
        running_var: Vec<Vec<S>>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let shape_ok = params.len() == layout.total
            && running_mean.len() == layout.layers.len()
            && running_var.len() == layout.layers.len()
            && layout
                .layers
                .iter()
                .zip(running_mean.iter().zip(&running_var))
                .all(|(l, (m, v))| m.len() == l.c_out && v.len() == l.c_out);
        if !shape_ok {
            return Err(Error::Checkpoint(
                "tensor shapes do not match config".into(),
            ));
        }
        Ok(Self {
            config,
            layout,
            params,
            running_mean,
            running_var,
        })
    }

    /// Zero-pads every signal to a common length of at least the minimum
    /// input length. Returns the flat `(n, T0)` batch.
    pub(crate) fn pack(&self, signals: &[&[f64]]) -> Result<(Vec<S>, usize)> {
        let longest = signals.iter().map(|s| s.len()).max().unwrap_or(0);
        if longest == 0 {
            return Err(Error::EmptyInput("metric input"));
        }
        if longest < self.config.min_input_len {
            log::warn!(
                "input of {longest} samples zero-padded to {}",
                self.config.min_input_len
            );
        }
        let t0 = longest.max(self.config.min_input_len);
        let mut out = vec![S::zero(); signals.len() * t0];
        for (i, s) in signals.iter().enumerate() {
            for (o, v) in out[i * t0..].iter_mut().zip(s.iter()) {
                *o = S::of(*v);
            }
        }
        Ok((out, t0))
    }

    pub(crate) fn forward_batch(
        &self,
        input: &[S],
        n: usize,
        t0: usize,
        pass: Pass,
        pool: &mut Pool<S>,
    ) -> Tape<S> {
        let lens = self.config.lengths(t0);
        let slope = S::of(self.config.leaky_slope);
        let eps = S::of(self.config.bn_eps);
        let mut acts: Vec<Vec<S>> = Vec::with_capacity(self.config.n_layers);
        let mut tapes = Vec::with_capacity(self.config.n_layers);
        let mut dropout_rng = pass.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut col = pool.dirty(self.col_len());
        for (l, lay) in self.layout.layers.iter().enumerate() {
            let (t_in, t_out) = (lens[l], lens[l + 1]);
            let co = lay.c_out;
            let width = n * t_out;
            let x: &[S] = if l == 0 { input } else { &acts[l - 1] };
            let mut z = pool.dirty(co * width);
            self.conv_forward(l, x, n, t_in, t_out, &mut z, &mut col);

            let (mean, var) = if !self.config.batch_norm {
                (vec![S::zero(); co], vec![S::one() - eps; co])
            } else if pass.batch_stats {
                let mut mean = vec![S::zero(); co];
                let mut var = vec![S::zero(); co];
                for c in 0..co {
                    let row = &z[c * width..(c + 1) * width];
                    let m = sum_f64(row) / width as f64;
                    let v = sq_dev_f64(row, m) / width as f64;
                    mean[c] = S::of(m);
                    var[c] = S::of(v);
                }
                (mean, var)
            } else {
                (self.running_mean[l].clone(), self.running_var[l].clone())
            };
            let invstd: Vec<S> = var.iter().map(|v| S::one() / (*v + eps).sqrt()).collect();
            let gamma = &self.params[lay.gamma..lay.gamma + co];
            let beta = &self.params[lay.beta..lay.beta + co];
            let mut a = pool.dirty(co * width);
            for c in 0..co {
                let (m, is) = (mean[c], invstd[c]);
                let (g, b) = if self.config.batch_norm {
                    (gamma[c], beta[c])
                } else {
                    (S::one(), S::zero())
                };
                let range = c * width..(c + 1) * width;
                for (zv, av) in z[range.clone()].iter_mut().zip(&mut a[range]) {
                    let xh = (*zv - m) * is;
                    *zv = xh;
                    *av = leaky(g * xh + b, slope);
                }
            }
            let mask = dropout_rng
                .as_mut()
                .filter(|_| self.config.dropout_p > 0.0)
                .map(|rng| {
                    let keep = S::of(1.0 / (1.0 - self.config.dropout_p));
                    let mask: Vec<S> = (0..a.len())
                        .map(|_| {
                            if rng.random::<f64>() < self.config.dropout_p {
                                S::zero()
                            } else {
                                keep
                            }
                        })
                        .collect();
                    for (v, m) in a.iter_mut().zip(&mask) {
                        *v *= *m;
                    }
                    mask
                });
            acts.push(a);
            tapes.push(LayerTape {
                xhat: z,
                invstd,
                mean,
                var,
                mask,
            });
        }
        pool.put(col);
        Tape {
            n,
            lens,
            acts,
            layers: tapes,
            batch_stats: pass.batch_stats,
        }
    }

    /// Running statistics follow `r <- momentum * r + (1 - momentum) * batch`
    /// with the unbiased batch variance.
    pub(crate) fn update_running(&mut self, tape: &Tape<S>) {
        if !self.config.batch_norm || !tape.batch_stats {
            return;
        }
        let mom = S::of(self.config.bn_momentum);
        let one = S::one();
        for (l, lt) in tape.layers.iter().enumerate() {
            let count = (tape.n * tape.lens[l + 1]) as f64;
            let unbias = S::of(if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            });
            for c in 0..lt.mean.len() {
                self.running_mean[l][c] = mom * self.running_mean[l][c] + (one - mom) * lt.mean[c];
                self.running_var[l][c] =
                    mom * self.running_var[l][c] + (one - mom) * lt.var[c] * unbias;
            }
        }
    }

    /// Distance between signals `i` and `j` of a tape.
    pub(crate) fn tape_distance(&self, tape: &Tape<S>, i: usize, j: usize) -> f64 {
        let n = tape.n;
        let mut total = 0.0f64;
        for (l, a) in tape.acts.iter().enumerate() {
            let co = self.layout.layers[l].c_out;
            let t = tape.lens[l + 1];
            let w = self.channel_weights(l);
            let mut layer = S::zero();
            for c in 0..co {
                let ri = &a[(c * n + i) * t..(c * n + i + 1) * t];
                let rj = &a[(c * n + j) * t..(c * n + j + 1) * t];
                layer += w[c] * l1_distance(ri, rj);
            }
            total += layer.f64() / (t * co) as f64;
        }
        total
    }

    /// Distance between signals `i` and `j` that also writes `dD/dF_j` into
    /// row `j` of `d_acts` and `dD/dw` into `dw`, one entry per channel
    /// weight. Row `i` is left alone; `dD/dF_i` is the negation of row `j`.
    pub(crate) fn tape_distance_dir(
        &self,
        tape: &Tape<S>,
        i: usize,
        j: usize,
        d_acts: &mut [Vec<S>],
        dw: &mut [f64],
    ) -> f64 {
        let n = tape.n;
        let mut total = 0.0f64;
        let mut k = 0;
        for (l, a) in tape.acts.iter().enumerate() {
            let co = self.layout.layers[l].c_out;
            let t = tape.lens[l + 1];
            let norm = 1.0 / (t * co) as f64;
            let w = self.channel_weights(l);
            let d = &mut d_acts[l];
            for c in 0..co {
                let (bi, bj) = ((c * n + i) * t, (c * n + j) * t);
                let step = S::of(norm) * w[c];
                let (ri, rj) = (&a[bi..bi + t], &a[bj..bj + t]);
                let mut l1 = S::zero();
                for ((gj, p), q) in d[bj..bj + t].iter_mut().zip(ri).zip(rj) {
                    let diff = *q - *p;
                    l1 += diff.abs();
                    *gj = if diff > S::zero() {
                        step
                    } else if diff < S::zero() {
                        -step
                    } else {
                        S::zero()
                    };
                }
                dw[k] = norm * l1.f64();
                total += (w[c] * l1).f64() * norm;
                k += 1;
            }
        }
        total
    }

    /// Finishes a pair's direction rows: row `j` (holding `dD/dF_j`) is
    /// scaled by `coef`, and row `i` becomes, or gains when `accumulate`,
    /// the matching `-coef * dD/dF_j`.
    pub(crate) fn settle_pair(
        &self,
        tape: &Tape<S>,
        d_acts: &mut [Vec<S>],
        i: usize,
        j: usize,
        coef: S,
        accumulate: bool,
    ) {
        let n = tape.n;
        for (l, d) in d_acts.iter_mut().enumerate() {
            let t = tape.lens[l + 1];
            for c in 0..self.layout.layers[l].c_out {
                let (ri, rj) = pair_rows(d, (c * n + i) * t, (c * n + j) * t, t);
                for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
                    *y *= coef;
                    *x = if accumulate { *x - *y } else { -*y };
                }
            }
        }
    }

    /// Backpropagates activation gradients through the backbone. Parameter
    /// gradients go into `grads` when given; the input gradient is returned
    /// when `want_input`.
    pub(crate) fn backward(
        &self,
        tape: &Tape<S>,
        input: &[S],
        mut d_acts: Vec<Vec<S>>,
        mut grads: Option<&mut [S]>,
        want_input: bool,
        pool: &mut Pool<S>,
    ) -> Option<Vec<S>> {
        let n = tape.n;
        let slope = S::of(self.config.leaky_slope);
        let bn = self.config.batch_norm;
        let mut col_buf = pool.dirty(2 * self.col_len());
        let mut input_grad = None;
        for l in (0..self.config.n_layers).rev() {
            let lay = &self.layout.layers[l];
            let (ci, co) = (lay.c_in, lay.c_out);
            let (t_in, t_out) = (tape.lens[l], tape.lens[l + 1]);
            let width = n * t_out;
            let lt = &tape.layers[l];
            let mut dz = std::mem::take(&mut d_acts[l]);
            if let Some(mask) = &lt.mask {
                for (d, m) in dz.iter_mut().zip(mask) {
                    *d *= *m;
                }
            }
            let gamma = &self.params[lay.gamma..lay.gamma + co];
            let beta = &self.params[lay.beta..lay.beta + co];
            for c in 0..co {
                let (g, b) = if bn {
                    (gamma[c], beta[c])
                } else {
                    (S::one(), S::zero())
                };
                let range = c * width..(c + 1) * width;
                let xh = &lt.xhat[range.clone()];
                let dzc = &mut dz[range];
                let (sum_dy, sum_dy_xh) = leaky_back(dzc, xh, g, b, slope);
                if let (Some(gr), true) = (grads.as_deref_mut(), bn) {
                    gr[lay.gamma + c] += S::of(sum_dy_xh);
                    gr[lay.beta + c] += S::of(sum_dy);
                }
                let is = lt.invstd[c];
                if bn && tape.batch_stats {
                    let m1 = S::of(g.f64() * sum_dy / width as f64);
                    let m2 = S::of(g.f64() * sum_dy_xh / width as f64);
                    for (d, x) in dzc.iter_mut().zip(xh) {
                        *d = is * (g * *d - m1 - *x * m2);
                    }
                } else {
                    let f = g * is;
                    for d in dzc.iter_mut() {
                        *d *= f;
                    }
                }
            }

            let x: &[S] = if l == 0 { input } else { &tape.acts[l - 1] };
            if let Some(gr) = grads.as_deref_mut() {
                for c in 0..co {
                    gr[lay.b + c] += S::of(sum_f64(&dz[c * width..(c + 1) * width]));
                }
            }
            if l == 0 && !want_input {
                self.conv_backward(
                    l,
                    x,
                    &dz,
                    n,
                    t_in,
                    t_out,
                    grads.as_deref_mut(),
                    None,
                    &mut col_buf,
                );
                pool.put(dz);
                break;
            }
            let mut dx = if l == 0 {
                pool.zeroed(ci * n * t_in)
            } else {
                std::mem::take(&mut d_acts[l - 1])
            };
            self.conv_backward(
                l,
                x,
                &dz,
                n,
                t_in,
                t_out,
                grads.as_deref_mut(),
                Some(&mut dx),
                &mut col_buf,
            );
            pool.put(dz);
            if l == 0 {
                input_grad = Some(dx);
            } else {
                d_acts[l - 1] = dx;
            }
        }
        pool.put(col_buf);
        input_grad
    }

    fn col_len(&self) -> usize {
        self.layout
            .layers
            .iter()
            .map(|l| 3 * l.c_in * BLOCK)
            .max()
            .unwrap_or(0)
    }

    /// `z = conv(x) + bias` for layer `l`, block by block. `col` holds at
    /// least [`Self::col_len`] elements.
    #[allow(clippy::too_many_arguments)]
    fn conv_forward(
        &self,
        l: usize,
        x: &[S],
        n: usize,
        t_in: usize,
        t_out: usize,
        z: &mut [S],
        col: &mut [S],
    ) {
        let lay = &self.layout.layers[l];
        let (ci, co) = (lay.c_in, lay.c_out);
        let width = n * t_out;
        let w = &self.params[lay.w..lay.w + 3 * co * ci];
        let bias = &self.params[lay.b..lay.b + co];
        if ci > 1 {
            for c in 0..co {
                z[c * width..(c + 1) * width].fill(bias[c]);
            }
            for s in 0..n {
                for k in 0..3 {
                    let (ta, tb) = tap_range(k, t_in, t_out);
                    gemm(
                        S::one(),
                        w,
                        View::new(k * ci, co, ci, 3 * ci, 1),
                        x,
                        View::new(s * t_in + 2 * ta + k - 1, ci, tb - ta, n * t_in, 2),
                        S::one(),
                        z,
                        View::new(s * t_out + ta, co, tb - ta, width, 1),
                    );
                }
            }
            return;
        }
        for blk in blocks(n, t_out) {
            let (s, t0, t1) = blk;
            let cols = t1 - t0;
            let col = &mut col[..3 * ci * cols];
            im2col_block(x, ci, n, t_in, t_out, blk, col);
            let off = s * t_out + t0;
            if ci == 1 {
                let (c0, rest) = col.split_at(cols);
                let (c1, c2) = rest.split_at(cols);
                for c in 0..co {
                    let (w0, w1, w2) = (w[3 * c], w[3 * c + 1], w[3 * c + 2]);
                    let row = &mut z[c * width + off..][..cols];
                    for (((o, a), b), d) in row.iter_mut().zip(c0).zip(c1).zip(c2) {
                        *o = bias[c] + w0 * *a + w1 * *b + w2 * *d;
                    }
                }
            }
        }
    }

    /// Weight gradient into `grads` and input gradient added into `dx`,
    /// given `dz`. `buf` holds at least twice [`Self::col_len`] elements.
    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        l: usize,
        x: &[S],
        dz: &[S],
        n: usize,
        t_in: usize,
        t_out: usize,
        mut grads: Option<&mut [S]>,
        mut dx: Option<&mut [S]>,
        buf: &mut [S],
    ) {
        let lay = &self.layout.layers[l];
        let (ci, co) = (lay.c_in, lay.c_out);
        let width = n * t_out;
        let w = &self.params[lay.w..lay.w + 3 * co * ci];
        let (col, dcol) = buf.split_at_mut(self.col_len());
        if ci > 1 {
            if let Some(gr) = grads.as_deref_mut() {
                let gw = &mut gr[lay.w..lay.w + 3 * co * ci];
                for s in 0..n {
                    for k in 0..3 {
                        let (ta, tb) = tap_range(k, t_in, t_out);
                        gemm(
                            S::one(),
                            dz,
                            View::new(s * t_out + ta, co, tb - ta, width, 1),
                            x,
                            View::new(s * t_in + 2 * ta + k - 1, tb - ta, ci, 2, n * t_in),
                            S::one(),
                            gw,
                            View::new(k * ci, co, ci, 3 * ci, 1),
                        );
                    }
                }
            }
            grads = None;
        }
        for blk in blocks(n, t_out) {
            let (s, t0, t1) = blk;
            let cols = t1 - t0;
            let off = s * t_out + t0;
            if let Some(gr) = grads.as_deref_mut() {
                let col = &mut col[..3 * ci * cols];
                im2col_block(x, ci, n, t_in, t_out, blk, col);
                let gw = &mut gr[lay.w..lay.w + 3 * co * ci];
                if ci == 1 {
                    for c in 0..co {
                        let row = &dz[c * width + off..][..cols];
                        for k in 0..3 {
                            gw[3 * c + k] += S::of(dot_f64(row, &col[k * cols..(k + 1) * cols]));
                        }
                    }
                } else {
                    gemm(
                        S::one(),
                        dz,
                        View::new(off, co, cols, width, 1),
                        col,
                        View::new(0, cols, 3 * ci, 1, cols),
                        S::one(),
                        gw,
                        View::new(0, co, 3 * ci, 3 * ci, 1),
                    );
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dcol = &mut dcol[..3 * ci * cols];
                gemm(
                    S::one(),
                    w,
                    View::new(0, 3 * ci, co, 1, 3 * ci),
                    dz,
                    View::new(off, co, cols, width, 1),
                    S::zero(),
                    dcol,
                    View::new(0, 3 * ci, cols, cols, 1),
                );
                col2im_block_add(dcol, ci, n, t_in, t_out, blk, dx);
            }
        }
    }

    fn check_pair(&self, x1: &AudioBuffer, x2: &AudioBuffer) -> Result<()> {
        x1.ensure_canonical()?;
        x2.ensure_canonical()?;
        if x1.is_empty() || x2.is_empty() {
            return Err(Error::EmptyInput("metric input"));
        }
        Ok(())
    }

    /// Per-layer activations of one signal. Train mode normalizes with the
    /// signal's own statistics and applies dropout with a fixed seed.
    pub fn forward(&self, x: &AudioBuffer, train_mode: bool) -> Result<FeatureStack> {
        if x.is_empty() {
            return Err(Error::EmptyInput("metric input"));
        }
        let (input, t0) = self.pack(&[x.samples()])?;
        let pass = if train_mode {
            Pass {
                batch_stats: true,
                dropout_seed: Some(0),
            }
        } else {
            Pass::EVAL
        };
        let tape = self.forward_batch(&input, 1, t0, pass, &mut Pool::default());
        Ok(FeatureStack {
            layers: tape
                .acts
                .iter()
                .enumerate()
                .map(|(l, a)| FeatureMap {
                    channels: self.layout.layers[l].c_out,
                    len: tape.lens[l + 1],
                    data: a.iter().map(|v| v.f64()).collect(),
                })
                .collect(),
        })
    }

    /// Weighted deep-feature L1 distance, eval mode. The shorter input is
    /// zero-padded to the longer.
    pub fn distance(&self, x1: &AudioBuffer, x2: &AudioBuffer) -> Result<f64> {
        self.check_pair(x1, x2)?;
        let (input, t0) = self.pack(&[x1.samples(), x2.samples()])?;
        let tape = self.forward_batch(&input, 2, t0, Pass::EVAL, &mut Pool::default());
        Ok(self.tape_distance(&tape, 0, 1))
    }

    /// Distances `D(reference, x)` for several `x`, sharing one forward pass
    /// of the reference per call.
    pub fn distances_to(
        &self,
        reference: &AudioBuffer,
        others: &[&AudioBuffer],
    ) -> Result<Vec<f64>> {
        let mut signals: Vec<&[f64]> = vec![reference.samples()];
        for o in others {
            self.check_pair(reference, o)?;
            signals.push(o.samples());
        }
        let (input, t0) = self.pack(&signals)?;
        let tape = self.forward_batch(&input, signals.len(), t0, Pass::EVAL, &mut Pool::default());
        Ok((1..signals.len())
            .map(|j| self.tape_distance(&tape, 0, j))
            .collect())
    }

    /// `sigmoid(a d + b)`.
    pub fn predict(&self, d: f64) -> f64 {
        let (a, b) = self.head();
        sigmoid(a * d + b)
    }

    pub fn loss(&self, x_ref: &AudioBuffer, x_per: &AudioBuffer, h: u8) -> Result<f64> {
        if h > 1 {
            return Err(Error::InvalidParameter(format!("label {h}")));
        }
        Ok(bce(self.predict(self.distance(x_ref, x_per)?), h))
    }

    /// Exact `dD(x_ref, x_per) / dx_per` in eval mode, one value per sample
    /// of `x_per`.
    pub fn grad_input(&self, x_ref: &AudioBuffer, x_per: &AudioBuffer) -> Result<Vec<f64>> {
        self.check_pair(x_ref, x_per)?;
        let (input, t0) = self.pack(&[x_ref.samples(), x_per.samples()])?;
        let mut pool = Pool::default();
        let tape = self.forward_batch(&input, 2, t0, Pass::EVAL, &mut pool);
        let mut d_acts: Vec<Vec<S>> = tape.acts.iter().map(|a| vec![S::zero(); a.len()]).collect();
        let mut dw = vec![0.0; self.all_channel_weights().len()];
        self.tape_distance_dir(&tape, 0, 1, &mut d_acts, &mut dw);
        let g = self
            .backward(&tape, &input, d_acts, None, true, &mut pool)
            .expect("input gradient requested");
        Ok(g[t0..t0 + x_per.len()].iter().map(|v| v.f64()).collect())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn small() -> NetConfig {
        NetConfig {
            n_layers: 4,
            base_channels: 4,
            channel_double_every: 2,
            min_input_len: 64,
            ..Default::default()
        }
    }

    #[test]
    fn shape_laws() {
        let c = NetConfig::default();
        let ch: Vec<usize> = (0..14).map(|l| c.channels(l)).collect();
        assert_eq!(&ch[..5], &[32; 5]);
        assert_eq!(&ch[5..10], &[64; 5]);
        assert_eq!(&ch[10..], &[128; 4]);
        let lens = c.lengths(40_000);
        assert_eq!(lens[1], 20_000);
        assert_eq!(lens[14], 3);
        assert_eq!(c.receptive_field(), (1 << 15) - 1);
    }

    #[test]
    fn receptive_field_matches_impulse_probe() {
        let cfg = small();
        let model = MetricModel::<f64>::init(cfg.clone(), 2).unwrap();
        // gradient of one top-layer unit w.r.t. the input has support equal
        // to that unit's receptive field
        let t0 = 256;
        let input = vec![0.1; t0];
        let tape = model.forward_batch(&input, 1, t0, Pass::EVAL, &mut Pool::default());
        let top = cfg.n_layers - 1;
        let t_top = tape.lens[top + 1];
        let mut d_acts: Vec<Vec<f64>> = tape.acts.iter().map(|a| vec![0.0; a.len()]).collect();
        d_acts[top][t_top / 2] = 1.0;
        let g = model
            .backward(&tape, &input, d_acts, None, true, &mut Pool::default())
            .unwrap();
        let nz: Vec<usize> = (0..t0).filter(|&i| g[i] != 0.0).collect();
        let span = nz.last().unwrap() - nz.first().unwrap() + 1;
        assert_eq!(span, cfg.receptive_field());
    }

    #[test]
    fn identity_zero_and_symmetry() {
        let model = MetricModel::<f64>::init(small(), 3).unwrap();
        let a = synth::speech_like(1, 300);
        let b = synth::speech_like(2, 280);
        assert_eq!(model.distance(&a, &a).unwrap(), 0.0);
        let ab = model.distance(&a, &b).unwrap();
        let ba = model.distance(&b, &a).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() <= 1e-12);
        let mut zeroed = model.clone();
        for v in &mut zeroed.params[zeroed.layout.channel_weight_range()] {
            *v = 0.0;
        }
        assert_eq!(zeroed.distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let model = MetricModel::<f64>::init(small(), 5).unwrap();
        let z = AudioBuffer::zeros(100, crate::CANONICAL_RATE);
        let f = model.forward(&z, false).unwrap();
        assert!(f.layers.iter().all(|l| l.data.iter().all(|v| *v == 0.0)));
        assert_eq!(f.layers.len(), 4);
        assert_eq!(f.layers[0].len, 50);
        let x = synth::speech_like(3, 100);
        assert_eq!(
            model.forward(&x, false).unwrap(),
            model.forward(&x, false).unwrap()
        );
    }

    #[test]
    fn head_and_loss() {
        let mut model = MetricModel::<f64>::init(small(), 1).unwrap();
        assert_eq!(model.predict(0.0), 0.5);
        assert!(model.predict(0.1) <= model.predict(0.2));
        model.set_head(0.0, 0.7);
        assert_eq!(model.predict(0.0), model.predict(100.0));
        assert!((bce(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce(1.0, 1) + (1.0 - BCE_CLAMP).ln()).abs() < 1e-15);
        assert!(bce(0.0, 1).is_finite());
    }

    #[test]
    fn input_gradient_basics() {
        let model = MetricModel::<f64>::init(small(), 7).unwrap();
        let a = synth::speech_like(1, 128);
        let g = model.grad_input(&a, &a).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let b = synth::speech_like(4, 128);
        let g1 = model.grad_input(&a, &b).unwrap();
        let mut doubled = model.clone();
        for v in &mut doubled.params[doubled.layout.channel_weight_range()] {
            *v *= 2.0;
        }
        let g2 = doubled.grad_input(&a, &b).unwrap();
        for (p, q) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * p, *q);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = MetricModel::<f64>::init(small(), 11).unwrap();
        let a = synth::speech_like(1, 128);
        let b = synth::speech_like(9, 128);
        let g = model.grad_input(&a, &b).unwrap();
        let eps = 1e-6;
        for i in (0..128).step_by(9) {
            let mut p = b.samples().to_vec();
            p[i] += eps;
            let up = model
                .distance(&a, &b.with_samples(p.clone()).unwrap())
                .unwrap();
            p[i] -= 2.0 * eps;
            let down = model.distance(&a, &b.with_samples(p).unwrap()).unwrap();
            let fd = (up - down) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {i}: analytic {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for batch_stats in [false, true] {
            let mut model = MetricModel::<f64>::init(small(), 11).unwrap();
            let a = synth::speech_like(1, 128);
            let b = synth::speech_like(9, 128);
            let f = |m: &MetricModel<f64>| {
                let (input, t0) = m.pack(&[a.samples(), b.samples()]).unwrap();
                let pass = Pass {
                    batch_stats,
                    dropout_seed: None,
                };
                let tape = m.forward_batch(&input, 2, t0, pass, &mut Pool::default());
                (m.tape_distance(&tape, 0, 1), tape, input)
            };
            let (_, tape, input) = f(&model);
            let mut d_acts: Vec<Vec<f64>> = tape.acts.iter().map(|a| vec![0.0; a.len()]).collect();
            let mut dw = vec![0.0; model.all_channel_weights().len()];
            model.tape_distance_dir(&tape, 0, 1, &mut d_acts, &mut dw);
            model.settle_pair(&tape, &mut d_acts, 0, 1, 1.0, false);
            let mut grads = vec![0.0; model.params.len()];
            model.backward(
                &tape,
                &input,
                d_acts,
                Some(&mut grads),
                false,
                &mut Pool::default(),
            );
            let ls = model.layout.layers.clone();
            for k in [
                0,
                1,
                5,
                ls[0].b,
                ls[0].gamma,
                ls[0].beta,
                ls[1].w + 3,
                ls[1].b,
                ls[3].w,
                ls[3].gamma + 1,
            ] {
                let o = model.params[k];
                model.params[k] = o + 1e-6;
                let up = f(&model).0;
                model.params[k] = o - 1e-6;
                let down = f(&model).0;
                model.params[k] = o;
                let fd = (up - down) / 2e-6;
                let rel = (fd - grads[k]).abs() / fd.abs().max(grads[k].abs()).max(1e-4);
                assert!(
                    rel < 1e-5,
                    "batch stats {batch_stats}, param {k}: fd {fd} analytic {}",
                    grads[k]
                );
            }
        }
    }
}
