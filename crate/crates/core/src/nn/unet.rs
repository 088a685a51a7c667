//! U-Net of partial convolutions with skip connections.
//!
//! Encoder stage `s` halves the resolution with a stride-2 partial convolution
//! and doubles the filters (`base << s`), then batch norm and ReLU. Decoder
//! level `l` (run from the deepest level up) upsamples values and masks 2x by
//! nearest neighbour, concatenates the encoder output one level up (the raw
//! input at level 0) and applies a stride-1 partial convolution, batch norm and
//! LeakyReLU. A 1x1 convolution and a sigmoid produce the output.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::NetworkInput;
use crate::rng::Rng;

use super::layers::{
    batch_norm, batch_norm_backward, concat_channels, leaky_relu, leaky_relu_backward,
    partial_conv, partial_conv_backward, pointwise_conv, pointwise_conv_backward, sigmoid,
    split_channels, upsample2, upsample2_backward, BatchNorm, BatchStats, BnCache, Conv, ConvCache,
};
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_filters: usize,
    /// Kernel size of encoder stage `s`.
    pub encoder_kernels: Vec<usize>,
    /// Kernel size of decoder level `l` (0 = full resolution).
    pub decoder_kernels: Vec<usize>,
    pub leaky_slope: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Input height and width.
    pub spatial: usize,
    pub encoder_batch_norm: Vec<bool>,
    pub decoder_batch_norm: Vec<bool>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_filters: 64,
            encoder_kernels: vec![7, 5, 3, 3],
            decoder_kernels: vec![3, 3, 3, 3],
            leaky_slope: 0.2,
            in_channels: crate::grid::N_FREQ,
            out_channels: crate::grid::N_FREQ,
            spatial: crate::grid::FINE_N,
            encoder_batch_norm: vec![true; 4],
            decoder_batch_norm: vec![true; 4],
            bn_momentum: 0.99,
            bn_eps: 1e-3,
        }
    }
}

impl UNetConfig {
    /// Default layout truncated or extended to `depth` stages with `base_filters`.
    pub fn with_depth(depth: usize, base_filters: usize) -> Self {
        let enc = [7, 5, 3, 3];
        Self {
            depth,
            base_filters,
            encoder_kernels: (0..depth).map(|s| *enc.get(s).unwrap_or(&3)).collect(),
            decoder_kernels: vec![3; depth],
            encoder_batch_norm: vec![true; depth],
            decoder_batch_norm: vec![true; depth],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("unet config: {msg}")));
        if self.depth == 0 || self.base_filters == 0 {
            return bad("depth and base_filters must be positive".into());
        }
        if self.in_channels == 0 || self.out_channels != self.in_channels {
            return bad(format!(
                "out_channels ({}) must equal in_channels ({})",
                self.out_channels, self.in_channels
            ));
        }
        for (name, list) in [
            ("encoder_kernels", self.encoder_kernels.len()),
            ("decoder_kernels", self.decoder_kernels.len()),
            ("encoder_batch_norm", self.encoder_batch_norm.len()),
            ("decoder_batch_norm", self.decoder_batch_norm.len()),
        ] {
            if list != self.depth {
                return bad(format!("{name} has {list} entries for depth {}", self.depth));
            }
        }
        if let Some(k) = self
            .encoder_kernels
            .iter()
            .chain(&self.decoder_kernels)
            .find(|k| **k % 2 == 0)
        {
            return bad(format!("kernel sizes must be odd, got {k}"));
        }
        let factor = 1usize << self.depth;
        if self.spatial % factor != 0 || self.spatial / factor < 2 {
            return bad(format!(
                "spatial size {} does not reach a >= 2 bottleneck after {} halvings",
                self.spatial, self.depth
            ));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must be in [0, 1) and bn_eps > 0".into());
        }
        Ok(())
    }

    pub fn encoder_channels(&self, stage: usize) -> usize {
        self.base_filters << stage
    }

    pub fn decoder_channels(&self, level: usize) -> usize {
        if level == 0 {
            (self.base_filters / 2).max(1)
        } else {
            self.base_filters << (level - 1)
        }
    }

    /// Channels arriving from below (upsampled) at decoder `level`.
    pub fn decoder_up_channels(&self, level: usize) -> usize {
        if level + 1 == self.depth {
            self.encoder_channels(self.depth - 1)
        } else {
            self.decoder_channels(level + 1)
        }
    }

    pub fn decoder_skip_channels(&self, level: usize) -> usize {
        if level == 0 {
            self.in_channels
        } else {
            self.encoder_channels(level - 1)
        }
    }

    pub fn encoder_in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.in_channels
        } else {
            self.encoder_channels(stage - 1)
        }
    }

    /// Learnable scalars: conv weights and biases, batch-norm scale and shift.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        for s in 0..self.depth {
            let (cin, cout, k) = (self.encoder_in_channels(s), self.encoder_channels(s), self.encoder_kernels[s]);
            total += cout * cin * k * k + cout;
            if self.encoder_batch_norm[s] {
                total += 2 * cout;
            }
        }
        for l in 0..self.depth {
            let cin = self.decoder_up_channels(l) + self.decoder_skip_channels(l);
            let (cout, k) = (self.decoder_channels(l), self.decoder_kernels[l]);
            total += cout * cin * k * k + cout;
            if self.decoder_batch_norm[l] {
                total += 2 * cout;
            }
        }
        total + self.out_channels * self.decoder_channels(0) + self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    pub conv: Conv<T>,
    pub bn: Option<BatchNorm<T>>,
}

/// How batch norm behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics everywhere.
    Train,
    /// Running statistics in the encoder, batch statistics in the decoder.
    TrainFrozenEncoder,
    /// Running statistics everywhere.
    Inference,
}

/// Identifies one layer in forward/parameter order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerId {
    Encoder(usize),
    Decoder(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetWeights<T> {
    pub config: UNetConfig,
    pub encoder: Vec<Stage<T>>,
    /// Indexed by level; executed from `depth - 1` down to 0.
    pub decoder: Vec<Stage<T>>,
    pub head: Conv<T>,
}

fn stage_zeros<T: Scalar>(cin: usize, cout: usize, k: usize, stride: usize, bn: bool) -> Stage<T> {
    Stage {
        conv: Conv::zeros(cin, cout, k, stride, k / 2),
        bn: bn.then(|| BatchNorm::new(cout)),
    }
}

impl<T: Scalar> UNetWeights<T> {
    /// Weights with every conv zeroed and batch norm at identity.
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let encoder = (0..config.depth)
            .map(|s| {
                stage_zeros(
                    config.encoder_in_channels(s),
                    config.encoder_channels(s),
                    config.encoder_kernels[s],
                    2,
                    config.encoder_batch_norm[s],
                )
            })
            .collect();
        let decoder = (0..config.depth)
            .map(|l| {
                stage_zeros(
                    config.decoder_up_channels(l) + config.decoder_skip_channels(l),
                    config.decoder_channels(l),
                    config.decoder_kernels[l],
                    1,
                    config.decoder_batch_norm[l],
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            head: Conv::zeros(config.decoder_channels(0), config.out_channels, 1, 1, 0),
        })
    }

    /// He-uniform conv weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn init(config: &UNetConfig, rng: &mut Rng) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut fill = |conv: &mut Conv<T>| {
            let fan_in = (conv.cin * conv.kernel * conv.kernel) as f64;
            let limit = (6.0 / fan_in).sqrt();
            for v in conv.weight.iter_mut() {
                *v = T::of(rng.random_range(-limit..limit));
            }
        };
        for stage in w.encoder.iter_mut().chain(w.decoder.iter_mut()) {
            fill(&mut stage.conv);
        }
        fill(&mut w.head);
        Ok(w)
    }

    /// Same layout, all values zero (gradient accumulators, optimizer moments).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_all_mut(|_, v| v.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    fn stage(&self, id: LayerId) -> &Stage<T> {
        match id {
            LayerId::Encoder(s) => &self.encoder[s],
            LayerId::Decoder(l) => &self.decoder[l],
        }
    }

    fn stage_mut(&mut self, id: LayerId) -> &mut Stage<T> {
        match id {
            LayerId::Encoder(s) => &mut self.encoder[s],
            LayerId::Decoder(l) => &mut self.decoder[l],
        }
    }

    /// Layers in forward order.
    pub fn layer_order(&self) -> Vec<LayerId> {
        let d = self.config.depth;
        (0..d)
            .map(LayerId::Encoder)
            .chain((0..d).rev().map(LayerId::Decoder))
            .collect()
    }

    /// Every stored block in checkpoint order: per layer in forward order
    /// `weight, bias, [gamma, beta, running_mean, running_var]`, then the head
    /// `weight, bias`. The flag marks learnable blocks.
    pub fn visit_all<'a>(&'a self, mut f: impl FnMut(bool, &'a [T])) {
        for id in self.layer_order() {
            let stage = self.stage(id);
            f(true, &stage.conv.weight);
            f(true, &stage.conv.bias);
            if let Some(bn) = &stage.bn {
                f(true, &bn.gamma);
                f(true, &bn.beta);
                f(false, &bn.running_mean);
                f(false, &bn.running_var);
            }
        }
        f(true, &self.head.weight);
        f(true, &self.head.bias);
    }

    pub fn visit_all_mut(&mut self, mut f: impl FnMut(bool, &mut Vec<T>)) {
        for id in self.layer_order() {
            let stage = self.stage_mut(id);
            f(true, &mut stage.conv.weight);
            f(true, &mut stage.conv.bias);
            if let Some(bn) = &mut stage.bn {
                f(true, &mut bn.gamma);
                f(true, &mut bn.beta);
                f(false, &mut bn.running_mean);
                f(false, &mut bn.running_var);
            }
        }
        f(true, &mut self.head.weight);
        f(true, &mut self.head.bias);
    }

    /// Learnable blocks only, in checkpoint order.
    pub fn learnable(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        self.visit_all(|learn, v| {
            if learn {
                out.push(v)
            }
        });
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        self.visit_all_mut(|learn, v| {
            if learn {
                out.push(v as *mut Vec<T>)
            }
        });
        // SAFETY: each pointer refers to a distinct field of `self`, and the
        // returned borrows are tied to the unique borrow of `self`.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|b| b.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetWeights<U> {
        let conv = |c: &Conv<T>| Conv {
            cin: c.cin,
            cout: c.cout,
            kernel: c.kernel,
            stride: c.stride,
            pad: c.pad,
            weight: c.weight.iter().map(|v| U::of(v.f64())).collect(),
            bias: c.bias.iter().map(|v| U::of(v.f64())).collect(),
        };
        let vec = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        let stage = |s: &Stage<T>| Stage {
            conv: conv(&s.conv),
            bn: s.bn.as_ref().map(|b| BatchNorm {
                gamma: vec(&b.gamma),
                beta: vec(&b.beta),
                running_mean: vec(&b.running_mean),
                running_var: vec(&b.running_var),
            }),
        };
        UNetWeights {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(stage).collect(),
            decoder: self.decoder.iter().map(stage).collect(),
            head: conv(&self.head),
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_all(|_, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Folds batch statistics from a training forward pass into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(LayerId, BatchStats<T>)]) {
        let momentum = T::of(self.config.bn_momentum);
        for (id, s) in stats {
            if let Some(bn) = &mut self.stage_mut(*id).bn {
                bn.update_running(s, momentum);
            }
        }
    }

    /// In-place `self += alpha * other` over learnable blocks.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        let src = other.learnable();
        for (dst, s) in self.learnable_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += alpha * *v;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    conv: ConvCache<T>,
    bn: Option<BnCache<T>>,
    pre_act: Tensor<T>,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    encoder: Vec<StageCache<T>>,
    decoder: Vec<Option<StageCache<T>>>,
    head_in: Tensor<T>,
    output: Tensor<T>,
}

pub struct ForwardOutput<T> {
    /// `[n, out_channels, spatial, spatial]`, values in (0, 1).
    pub output: Tensor<T>,
    pub cache: Option<ForwardCache<T>>,
    /// Batch statistics of every batch-norm layer that used them.
    pub batch_stats: Vec<(LayerId, BatchStats<T>)>,
    /// Output masks of each layer in forward order, for inspection.
    pub masks: Vec<(LayerId, Tensor<T>)>,
}

fn run_stage<T: Scalar>(
    stage: &Stage<T>,
    x: &Tensor<T>,
    mask: &Tensor<T>,
    use_batch_stats: bool,
    slope: T,
    eps: T,
    keep: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<StageCache<T>>, Option<BatchStats<T>>)> {
    let (conv_out, out_mask, conv_cache) = partial_conv(&stage.conv, x, mask, keep)?;
    let (pre_act, bn_cache, stats) = match &stage.bn {
        Some(bn) => {
            let (y, c, s) = batch_norm(bn, &conv_out, use_batch_stats, eps);
            (y, Some(c), s)
        }
        None => (conv_out, None, None),
    };
    let mut act = pre_act.clone();
    leaky_relu(&mut act, slope);
    let cache = if keep {
        Some(StageCache {
            conv: conv_cache.expect("cache requested"),
            bn: bn_cache,
            pre_act,
        })
    } else {
        None
    };
    Ok((act, out_mask, cache, stats))
}

/// Forward pass on a batch `x` with per-channel binary `mask` of the same shape.
pub fn forward<T: Scalar>(
    weights: &UNetWeights<T>,
    x: &Tensor<T>,
    mask: &Tensor<T>,
    mode: Mode,
    keep_cache: bool,
) -> Result<ForwardOutput<T>> {
    let cfg = &weights.config;
    let expect = [x.n(), cfg.in_channels, cfg.spatial, cfg.spatial];
    if x.shape() != expect || mask.shape() != expect {
        return Err(Error::Shape(format!(
            "network expects {expect:?}, got input {:?} and mask {:?}",
            x.shape(),
            mask.shape()
        )));
    }
    let eps = T::of(cfg.bn_eps);
    let leaky = T::of(cfg.leaky_slope);
    let mut batch_stats = Vec::new();
    let mut masks = Vec::new();

    let mut enc_out: Vec<(Tensor<T>, Tensor<T>)> = Vec::with_capacity(cfg.depth);
    let mut enc_cache = Vec::with_capacity(cfg.depth);
    for s in 0..cfg.depth {
        let (xin, min) = if s == 0 { (x, mask) } else { (&enc_out[s - 1].0, &enc_out[s - 1].1) };
        let batch = mode == Mode::Train;
        let (y, m, cache, stats) =
            run_stage(&weights.encoder[s], xin, min, batch, T::zero(), eps, keep_cache)?;
        if let Some(st) = stats {
            batch_stats.push((LayerId::Encoder(s), st));
        }
        masks.push((LayerId::Encoder(s), m.clone()));
        enc_cache.push(cache);
        enc_out.push((y, m));
    }

    let mut dec_cache: Vec<Option<StageCache<T>>> = vec![None; cfg.depth];
    let (mut cur, mut cur_mask) = enc_out[cfg.depth - 1].clone();
    for l in (0..cfg.depth).rev() {
        let up = upsample2(&cur);
        let up_mask = upsample2(&cur_mask);
        let (skip, skip_mask) = if l == 0 {
            (x, mask)
        } else {
            (&enc_out[l - 1].0, &enc_out[l - 1].1)
        };
        let cat = concat_channels(&up, skip)?;
        let cat_mask = concat_channels(&up_mask, skip_mask)?;
        let batch = mode != Mode::Inference;
        let (y, m, cache, stats) =
            run_stage(&weights.decoder[l], &cat, &cat_mask, batch, leaky, eps, keep_cache)?;
        if let Some(st) = stats {
            batch_stats.push((LayerId::Decoder(l), st));
        }
        masks.push((LayerId::Decoder(l), m.clone()));
        dec_cache[l] = cache;
        cur = y;
        cur_mask = m;
    }

    let mut output = pointwise_conv(&weights.head, &cur)?;
    sigmoid(&mut output);
    if !output.all_finite() {
        return Err(Error::NonFinite("network output".into()));
    }
    let cache = if keep_cache {
        Some(ForwardCache {
            encoder: enc_cache.into_iter().map(|c| c.expect("cache requested")).collect(),
            decoder: dec_cache,
            head_in: cur,
            output: output.clone(),
        })
    } else {
        None
    };
    Ok(ForwardOutput {
        output,
        cache,
        batch_stats,
        masks,
    })
}

fn stage_backward<T: Scalar>(
    stage: &Stage<T>,
    cache: &StageCache<T>,
    mut grad: Tensor<T>,
    slope: T,
    need_input: bool,
    grads: &mut Stage<T>,
) -> Result<Option<Tensor<T>>> {
    leaky_relu_backward(&cache.pre_act, &mut grad, slope);
    if let (Some(bn), Some(bc)) = (&stage.bn, &cache.bn) {
        let g = batch_norm_backward(bn, bc, &grad);
        let gb = grads.bn.as_mut().expect("gradient layout matches weights");
        gb.gamma.iter_mut().zip(&g.gamma).for_each(|(a, b)| *a += *b);
        gb.beta.iter_mut().zip(&g.beta).for_each(|(a, b)| *a += *b);
        grad = g.input;
    }
    let g = partial_conv_backward(&stage.conv, &cache.conv, &grad, need_input)?;
    grads.conv.weight.iter_mut().zip(&g.weight).for_each(|(a, b)| *a += *b);
    grads.conv.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += *b);
    Ok(g.input)
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g),
    }
}

/// Gradients of `sum(grad_output * output)` with respect to every learnable
/// parameter. Masks are treated as constants. Running statistics in the
/// returned structure are zero.
pub fn backward<T: Scalar>(
    weights: &UNetWeights<T>,
    cache: &ForwardCache<T>,
    grad_output: &Tensor<T>,
) -> Result<UNetWeights<T>> {
    let cfg = &weights.config;
    if grad_output.shape() != cache.output.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs output {:?}",
            grad_output.shape(),
            cache.output.shape()
        )));
    }
    let mut grads = weights.zeros_like();
    let leaky = T::of(cfg.leaky_slope);

    let mut dz = grad_output.clone();
    for (g, y) in dz.data_mut().iter_mut().zip(cache.output.data()) {
        *g *= *y * (T::one() - *y);
    }
    let hg = pointwise_conv_backward(&weights.head, &cache.head_in, &dz);
    grads.head.weight = hg.weight;
    grads.head.bias = hg.bias;

    let mut enc_grad: Vec<Option<Tensor<T>>> = vec![None; cfg.depth];
    let mut grad = hg.input.expect("pointwise backward returns input grad");
    for l in 0..cfg.depth {
        let sc = cache.decoder[l].as_ref().expect("decoder cache present");
        let g_cat = stage_backward(&weights.decoder[l], sc, grad, leaky, true, &mut grads.decoder[l])?
            .expect("input grad requested");
        let (g_up, g_skip) = split_channels(&g_cat, cfg.decoder_up_channels(l));
        if l > 0 {
            add_into(&mut enc_grad[l - 1], g_skip);
        }
        grad = upsample2_backward(&g_up);
        if l + 1 == cfg.depth {
            add_into(&mut enc_grad[cfg.depth - 1], grad.clone());
        }
    }
    for s in (0..cfg.depth).rev() {
        let g = enc_grad[s].take().expect("every encoder output feeds the decoder");
        let gin = stage_backward(&weights.encoder[s], &cache.encoder[s], g, T::zero(), s > 0, &mut grads.encoder[s])?;
        if s > 0 {
            add_into(&mut enc_grad[s - 1], gin.expect("input grad requested"));
        }
    }
    Ok(grads)
}

/// Stacks network inputs into `(values, mask)` batches of shape `[n, K, 32, 32]`.
pub fn batch_inputs<T: Scalar>(inputs: &[&NetworkInput]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let k = first.mask.n_freq();
    let plane = first.mask.plane().len();
    let side = (plane as f64).sqrt() as usize;
    let mut x = Vec::with_capacity(inputs.len() * k * plane);
    let mut m = Vec::with_capacity(inputs.len() * k * plane);
    for inp in inputs {
        if inp.s_irr.len() != k * plane || inp.mask.n_freq() != k {
            return Err(Error::Shape("inconsistent network inputs in batch".into()));
        }
        x.extend(inp.s_irr.iter().map(|v| T::of(*v as f64)));
        let mplane: Vec<T> = inp
            .mask
            .plane()
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        for _ in 0..k {
            m.extend_from_slice(&mplane);
        }
    }
    let shape = [inputs.len(), k, side, side];
    Ok((Tensor::from_vec(shape, x)?, Tensor::from_vec(shape, m)?))
}

/// Inference on a batch of inputs; returns one `[k][j][i]` prediction per input.
pub fn predict<T: Scalar>(weights: &UNetWeights<T>, inputs: &[&NetworkInput]) -> Result<Vec<Vec<f64>>> {
    let (x, m) = batch_inputs::<T>(inputs)?;
    let out = forward(weights, &x, &m, Mode::Inference, false)?.output;
    Ok((0..out.n())
        .map(|b| out.sample(b).iter().map(|v| v.f64()).collect())
        .collect())
}
