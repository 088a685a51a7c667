//! Partial convolution, batch normalisation, activations and resampling, each
//! with an explicit backward pass over a cache recorded by the forward pass.

use crate::error::{Error, Result};

use super::tensor::{matmul, Scalar, Tensor};

/// Square-kernel convolution parameters. `weight` is `[cout][cin][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: vec![T::zero(); cout * cin * kernel * kernel],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |len: usize| -> Result<usize> {
            let padded = len + 2 * self.pad;
            if padded < self.kernel {
                return Err(Error::Shape(format!(
                    "kernel {} larger than padded input {padded}",
                    self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

/// Saved state of [`partial_conv`] needed by [`partial_conv_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    /// im2col of the masked input, `[cin*k*k][n*ho*wo]`.
    cols: Vec<T>,
    /// Renormalisation factor per output position, 0 where the window was empty.
    ratio: Vec<T>,
    mask_in: Tensor<T>,
    out_hw: (usize, usize),
}

/// Output columns `ox` whose input column `ox * stride + offset - pad` lies in `0..len`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = if len + pad > offset {
        ((len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Copies windows of `x` into columns: `cols[(c*k + dy)*k + dx][n*ho*wo + oy*wo + ox]`.
fn im2col<T: Scalar>(conv: &Conv<T>, x: &Tensor<T>, ho: usize, wo: usize) -> Vec<T> {
    let [n, c, h, w] = x.shape();
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad);
    let cols_n = n * ho * wo;
    let mut cols = vec![T::zero(); conv.patch_len() * cols_n];
    let data = x.data();
    for ci in 0..c {
        for dy in 0..k {
            let (oy_lo, oy_hi) = valid_range(ho, h, s, dy, p);
            for dx in 0..k {
                let (ox_lo, ox_hi) = valid_range(wo, w, s, dx, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (ci * k + dy) * k + dx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let src = &data[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let y = oy * s + dy - p;
                        let src_row = &src[y * w..(y + 1) * w];
                        let base = (b * ho + oy) * wo;
                        let x0 = ox_lo * s + dx - p;
                        let out = &mut dst[base + ox_lo..base + ox_hi];
                        if s == 1 {
                            out.copy_from_slice(&src_row[x0..x0 + out.len()]);
                        } else {
                            for (o, v) in out.iter_mut().zip(src_row[x0..].iter().step_by(s)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto an `[n, c, h, w]` tensor.
fn col2im<T: Scalar>(conv: &Conv<T>, cols: &[T], shape: [usize; 4], ho: usize, wo: usize) -> Tensor<T> {
    let [n, c, h, w] = shape;
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad);
    let cols_n = n * ho * wo;
    let mut out = Tensor::zeros(shape);
    let data = out.data_mut();
    for ci in 0..c {
        for dy in 0..k {
            let (oy_lo, oy_hi) = valid_range(ho, h, s, dy, p);
            for dx in 0..k {
                let (ox_lo, ox_hi) = valid_range(wo, w, s, dx, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (ci * k + dy) * k + dx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let dst = &mut data[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let y = oy * s + dy - p;
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        let base = (b * ho + oy) * wo;
                        let x0 = ox_lo * s + dx - p;
                        let inp = &src[base + ox_lo..base + ox_hi];
                        for (d, v) in dst_row[x0..].iter_mut().step_by(s).zip(inp) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Number of valid (mask = 1) input cells under every output window, over all channels.
/// Padding cells count as mask 0.
pub fn window_mask_sums<T: Scalar>(conv: &Conv<T>, mask: &Tensor<T>, ho: usize, wo: usize) -> Vec<T> {
    let [n, c, h, w] = mask.shape();
    let mut plane = vec![T::zero(); h * w];
    let mut sums = vec![T::zero(); n * ho * wo];
    for b in 0..n {
        plane.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..c {
            let m = &mask.sample(b)[ci * h * w..(ci + 1) * h * w];
            for (p, v) in plane.iter_mut().zip(m) {
                *p += *v;
            }
        }
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = T::zero();
                for dy in 0..conv.kernel {
                    let y = (oy * conv.stride + dy) as isize - conv.pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..conv.kernel {
                        let x = (ox * conv.stride + dx) as isize - conv.pad as isize;
                        if x >= 0 && x < w as isize {
                            s += plane[y as usize * w + x as usize];
                        }
                    }
                }
                sums[(b * ho + oy) * wo + ox] = s;
            }
        }
    }
    sums
}

/// Partial convolution: per output window with `sum(M) > 0`,
/// `W . (X * M) * sum(1) / sum(M) + b`, else 0; the updated mask is 1 exactly
/// where `sum(M) > 0`, replicated over output channels.
pub fn partial_conv<T: Scalar>(
    conv: &Conv<T>,
    x: &Tensor<T>,
    mask: &Tensor<T>,
    keep_cache: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<ConvCache<T>>)> {
    if x.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "input {:?} vs mask {:?}",
            x.shape(),
            mask.shape()
        )));
    }
    if x.c() != conv.cin {
        return Err(Error::Shape(format!(
            "conv expects {} channels, input has {}",
            conv.cin,
            x.c()
        )));
    }
    let n = x.n();
    let (ho, wo) = conv.out_size(x.h(), x.w())?;
    let hw = ho * wo;

    let mut masked = x.clone();
    for (v, m) in masked.data_mut().iter_mut().zip(mask.data()) {
        *v *= *m;
    }
    let cols = im2col(conv, &masked, ho, wo);
    let mut raw = vec![T::zero(); conv.cout * n * hw];
    matmul(false, false, conv.cout, n * hw, conv.patch_len(), &conv.weight, &cols, T::zero(), &mut raw);

    let full = T::of(conv.patch_len() as f64);
    let ratio: Vec<T> = window_mask_sums(conv, mask, ho, wo)
        .into_iter()
        .map(|s| if s > T::zero() { full / s } else { T::zero() })
        .collect();

    let mut out = Tensor::zeros([n, conv.cout, ho, wo]);
    let mut out_mask = Tensor::zeros([n, conv.cout, ho, wo]);
    for b in 0..n {
        let o = out.sample_mut(b);
        for co in 0..conv.cout {
            let r = &raw[co * n * hw + b * hw..co * n * hw + (b + 1) * hw];
            for p in 0..hw {
                let q = ratio[b * hw + p];
                if q > T::zero() {
                    o[co * hw + p] = r[p] * q + conv.bias[co];
                }
            }
        }
        let om = out_mask.sample_mut(b);
        for co in 0..conv.cout {
            for p in 0..hw {
                if ratio[b * hw + p] > T::zero() {
                    om[co * hw + p] = T::one();
                }
            }
        }
    }
    let cache = keep_cache.then(|| ConvCache {
        cols,
        ratio,
        mask_in: mask.clone(),
        out_hw: (ho, wo),
    });
    Ok((out, out_mask, cache))
}

/// Gradients of [`partial_conv`]. The mask is a constant: no gradient flows
/// through the mask update or the renormalisation pattern.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn partial_conv_backward<T: Scalar>(
    conv: &Conv<T>,
    cache: &ConvCache<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (ho, wo) = cache.out_hw;
    let n = cache.mask_in.n();
    if grad_out.shape() != [n, conv.cout, ho, wo] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs output {:?}",
            grad_out.shape(),
            [n, conv.cout, ho, wo]
        )));
    }
    let hw = ho * wo;
    let mut g_raw = vec![T::zero(); conv.cout * n * hw];
    let mut g_bias = vec![T::zero(); conv.cout];
    for b in 0..n {
        let g = grad_out.sample(b);
        for co in 0..conv.cout {
            let dst = &mut g_raw[co * n * hw + b * hw..co * n * hw + (b + 1) * hw];
            for p in 0..hw {
                let q = cache.ratio[b * hw + p];
                if q > T::zero() {
                    let gv = g[co * hw + p];
                    dst[p] = gv * q;
                    g_bias[co] += gv;
                }
            }
        }
    }
    let patch = conv.patch_len();
    let mut g_weight = vec![T::zero(); conv.cout * patch];
    matmul(false, true, conv.cout, patch, n * hw, &g_raw, &cache.cols, T::zero(), &mut g_weight);

    let input = if need_input_grad {
        let mut g_cols = vec![T::zero(); patch * n * hw];
        matmul(true, false, patch, n * hw, conv.cout, &conv.weight, &g_raw, T::zero(), &mut g_cols);
        let mut gx = col2im(conv, &g_cols, cache.mask_in.shape(), ho, wo);
        for (v, m) in gx.data_mut().iter_mut().zip(cache.mask_in.data()) {
            *v *= *m;
        }
        Some(gx)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weight: g_weight,
        bias: g_bias,
    })
}

/// Plain 1x1 convolution (no mask).
pub fn pointwise_conv<T: Scalar>(conv: &Conv<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if conv.kernel != 1 || x.c() != conv.cin {
        return Err(Error::Shape(format!(
            "pointwise conv {}->{} k{} on input {:?}",
            conv.cin,
            conv.cout,
            conv.kernel,
            x.shape()
        )));
    }
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros([n, conv.cout, h, w]);
    for b in 0..n {
        let o = out.sample_mut(b);
        for co in 0..conv.cout {
            o[co * hw..(co + 1) * hw].fill(conv.bias[co]);
        }
        matmul(false, false, conv.cout, hw, conv.cin, &conv.weight, x.sample(b), T::one(), o);
    }
    Ok(out)
}

pub fn pointwise_conv_backward<T: Scalar>(
    conv: &Conv<T>,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> ConvGrads<T> {
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let mut g_weight = vec![T::zero(); conv.cout * conv.cin];
    let mut g_bias = vec![T::zero(); conv.cout];
    let mut gx = Tensor::zeros(x.shape());
    for b in 0..n {
        let g = grad_out.sample(b);
        for co in 0..conv.cout {
            g_bias[co] += g[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        matmul(false, true, conv.cout, conv.cin, hw, g, x.sample(b), T::one(), &mut g_weight);
        matmul(true, false, conv.cin, hw, conv.cout, &conv.weight, g, T::zero(), gx.sample_mut(b));
    }
    ConvGrads {
        input: Some(gx),
        weight: g_weight,
        bias: g_bias,
    }
}

/// Per-channel affine batch normalisation with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, stats: &BatchStats<T>, momentum: T) {
        let rest = T::one() - momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = momentum * self.running_mean[c] + rest * stats.mean[c];
            self.running_var[c] = momentum * self.running_var[c] + rest * stats.var[c];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Normalises with statistics over batch and space (`use_batch_stats`) or with
/// the running estimates. Returns the batch statistics when they were used.
pub fn batch_norm<T: Scalar>(
    bn: &BatchNorm<T>,
    x: &Tensor<T>,
    use_batch_stats: bool,
    eps: T,
) -> (Tensor<T>, BnCache<T>, Option<BatchStats<T>>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let (mean, var) = if use_batch_stats {
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += x.sample(b)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = s / count;
            let mut v = T::zero();
            for b in 0..n {
                for &val in &x.sample(b)[ch * hw..(ch + 1) * hw] {
                    v += (val - mu) * (val - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / count;
        }
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        let src = x.sample(b);
        let xh = xhat.sample_mut(b);
        for ch in 0..c {
            for p in ch * hw..(ch + 1) * hw {
                xh[p] = (src[p] - mean[ch]) * inv_std[ch];
            }
        }
        let xh = xhat.sample(b).to_vec();
        let o = out.sample_mut(b);
        for ch in 0..c {
            for p in ch * hw..(ch + 1) * hw {
                o[p] = bn.gamma[ch] * xh[p] + bn.beta[ch];
            }
        }
    }
    let stats = use_batch_stats.then_some(BatchStats { mean, var });
    (
        out,
        BnCache {
            xhat,
            inv_std,
            batch_stats: use_batch_stats,
        },
        stats,
    )
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Scalar>(bn: &BatchNorm<T>, cache: &BnCache<T>, grad_out: &Tensor<T>) -> BnGrads<T> {
    let [n, c, h, w] = grad_out.shape();
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for b in 0..n {
        let g = grad_out.sample(b);
        let xh = cache.xhat.sample(b);
        for ch in 0..c {
            for p in ch * hw..(ch + 1) * hw {
                g_gamma[ch] += g[p] * xh[p];
                g_beta[ch] += g[p];
            }
        }
    }
    let mut gx = Tensor::zeros(grad_out.shape());
    for b in 0..n {
        let g = grad_out.sample(b);
        let xh = cache.xhat.sample(b).to_vec();
        let dst = gx.sample_mut(b);
        for ch in 0..c {
            let scale = bn.gamma[ch] * cache.inv_std[ch];
            for p in ch * hw..(ch + 1) * hw {
                dst[p] = if cache.batch_stats {
                    // dxhat = g * gamma; sums over the batch are g_beta * gamma and g_gamma * gamma.
                    scale * (g[p] - (g_beta[ch] + xh[p] * g_gamma[ch]) / count)
                } else {
                    scale * g[p]
                };
            }
        }
    }
    BnGrads {
        input: gx,
        gamma: g_gamma,
        beta: g_beta,
    }
}

/// Leaky ReLU with negative slope `slope` (0 gives ReLU), in place.
pub fn leaky_relu<T: Scalar>(x: &mut Tensor<T>, slope: T) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward of [`leaky_relu`] given its pre-activation input.
pub fn leaky_relu_backward<T: Scalar>(pre: &Tensor<T>, grad: &mut Tensor<T>, slope: T) {
    for (g, p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if *p <= T::zero() {
            *g *= slope;
        }
    }
}

pub fn sigmoid<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

/// Nearest-neighbour 2x upsampling: each cell becomes a 2x2 block.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(plane * 2 * h + y) * 2 * w + xx] = src[(plane * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = g.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    let src = g.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(plane * h + y / 2) * w + xx / 2] += src[(plane * h2 + y) * w2 + xx];
            }
        }
    }
    out
}

/// Channel concatenation `[a, b]` per sample.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    if b.n() != n || b.h() != h || b.w() != w {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let cb = b.c();
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    for s in 0..n {
        let dst = out.sample_mut(s);
        dst[..ca * h * w].copy_from_slice(a.sample(s));
        dst[ca * h * w..].copy_from_slice(b.sample(s));
    }
    Ok(out)
}

/// Splits a gradient of [`concat_channels`] back into its two parts.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.shape();
    let mut a = Tensor::zeros([n, ca, h, w]);
    let mut b = Tensor::zeros([n, c - ca, h, w]);
    for s in 0..n {
        let src = g.sample(s);
        a.sample_mut(s).copy_from_slice(&src[..ca * h * w]);
        b.sample_mut(s).copy_from_slice(&src[ca * h * w..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn rand_vec(rng: &mut rand_chacha::ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_conv(rng: &mut rand_chacha::ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize) -> Conv<f64> {
        let mut c = Conv::zeros(cin, cout, k, stride, k / 2);
        c.weight = rand_vec(rng, c.weight.len());
        c.bias = rand_vec(rng, cout);
        c
    }

    /// Plain zero-padded convolution, written as direct loops.
    fn dense_conv(conv: &Conv<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let (ho, wo) = conv.out_size(h, w).unwrap();
        let k = conv.kernel;
        let mut out = Tensor::zeros([n, conv.cout, ho, wo]);
        for b in 0..n {
            for co in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = conv.bias[co];
                        for ci in 0..c {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let y = (oy * conv.stride + dy) as isize - conv.pad as isize;
                                    let xx = (ox * conv.stride + dx) as isize - conv.pad as isize;
                                    if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                                        s += conv.weight[((co * c + ci) * k + dy) * k + dx]
                                            * x.at(b, ci, y as usize, xx as usize);
                                    }
                                }
                            }
                        }
                        out.sample_mut(b)[(co * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn full_mask_is_dense_convolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for &(k, stride) in &[(3, 1), (5, 2), (7, 2), (3, 2)] {
            let conv = rand_conv(&mut rng, 3, 4, k, stride);
            let x = Tensor::from_vec([2, 3, 8, 8], rand_vec(&mut rng, 2 * 3 * 64)).unwrap();
            let m = Tensor::filled([2, 3, 8, 8], 1.0);
            let (out, mask, _) = partial_conv(&conv, &x, &m, false).unwrap();
            let dense = dense_conv(&conv, &x);
            // Border windows extend into padding, which is unobserved, so only
            // interior windows see a full mask.
            let (ho, wo) = (out.h(), out.w());
            for b in 0..2 {
                for co in 0..4 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let inside = |o: usize, len: usize| {
                                o * stride >= k / 2 && o * stride + k / 2 < len
                            };
                            if inside(oy, 8) && inside(ox, 8) {
                                let (a, d) = (out.at(b, co, oy, ox), dense.at(b, co, oy, ox));
                                assert!((a - d).abs() <= 1e-12 * d.abs().max(1.0));
                            }
                        }
                    }
                }
            }
            assert!(mask.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn full_mask_without_padding_is_dense_everywhere() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut conv = rand_conv(&mut rng, 3, 2, 3, 1);
        conv.pad = 0;
        let x = Tensor::from_vec([1, 3, 6, 6], rand_vec(&mut rng, 108)).unwrap();
        let (out, _, _) = partial_conv(&conv, &x, &Tensor::filled([1, 3, 6, 6], 1.0), false).unwrap();
        let dense = dense_conv(&conv, &x);
        assert_eq!(out.shape(), [1, 2, 4, 4]);
        for (a, d) in out.data().iter().zip(dense.data()) {
            assert!((a - d).abs() <= 1e-12 * d.abs().max(1.0));
        }
    }

    #[test]
    fn single_centre_pixel_is_renormalised_by_nine() {
        let mut conv = Conv::<f64>::zeros(1, 1, 3, 1, 1);
        conv.weight = vec![1.0; 9];
        let x = Tensor::from_vec([1, 1, 3, 3], vec![0.3, -2.0, 5.0, 1.0, 0.7, 4.0, 9.0, 8.0, 6.0]).unwrap();
        let mut m = Tensor::zeros([1, 1, 3, 3]);
        m.data_mut()[4] = 1.0;
        let (out, mask, _) = partial_conv(&conv, &x, &m, false).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0 * 0.7);
        assert!(mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn empty_windows_output_zero_without_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut conv = rand_conv(&mut rng, 2, 3, 3, 1);
        conv.bias = vec![5.0, -3.0, 1.0];
        let x = Tensor::from_vec([1, 2, 6, 6], rand_vec(&mut rng, 72)).unwrap();
        let m = Tensor::zeros([1, 2, 6, 6]);
        let (out, mask, cache) = partial_conv(&conv, &x, &m, true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(mask.data().iter().all(|&v| v == 0.0));
        let g = partial_conv_backward(&conv, &cache.unwrap(), &Tensor::filled(out.shape(), 1.0), true).unwrap();
        assert!(g.bias.iter().all(|&v| v == 0.0));
        assert!(g.weight.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let conv = rand_conv(&mut rng, 2, 3, 3, 2);
        let x = Tensor::from_vec([1, 2, 6, 6], rand_vec(&mut rng, 72)).unwrap();
        let m = Tensor::filled([1, 2, 6, 6], 1.0);
        let (out, _, cache) = partial_conv(&conv, &x, &m, true).unwrap();
        let g = partial_conv_backward(&conv, &cache.unwrap(), &Tensor::zeros(out.shape()), true).unwrap();
        assert!(g.weight.iter().chain(&g.bias).all(|&v| v == 0.0));
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    fn scalar_of(out: &Tensor<f64>, probe: &[f64]) -> f64 {
        out.data().iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn partial_conv_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let conv = rand_conv(&mut rng, 2, 3, 3, 2);
        let x = Tensor::from_vec([2, 2, 6, 6], rand_vec(&mut rng, 144)).unwrap();
        let mask_vals: Vec<f64> = (0..144).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let m = Tensor::from_vec([2, 2, 6, 6], mask_vals).unwrap();
        let (out, _, cache) = partial_conv(&conv, &x, &m, true).unwrap();
        let probe = rand_vec(&mut rng, out.data().len());
        let g = partial_conv_backward(&conv, &cache.unwrap(), &Tensor::from_vec(out.shape(), probe.clone()).unwrap(), true)
            .unwrap();
        let h = 1e-6;
        for idx in 0..conv.weight.len() {
            let mut p = conv.clone();
            p.weight[idx] += h;
            let up = scalar_of(&partial_conv(&p, &x, &m, false).unwrap().0, &probe);
            p.weight[idx] -= 2.0 * h;
            let down = scalar_of(&partial_conv(&p, &x, &m, false).unwrap().0, &probe);
            assert!((g.weight[idx] - (up - down) / (2.0 * h)).abs() < 1e-7);
        }
        let gx = g.input.unwrap();
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let up = scalar_of(&partial_conv(&conv, &xp, &m, false).unwrap().0, &probe);
            xp.data_mut()[idx] -= 2.0 * h;
            let down = scalar_of(&partial_conv(&conv, &xp, &m, false).unwrap().0, &probe);
            assert!((gx.data()[idx] - (up - down) / (2.0 * h)).abs() < 1e-7);
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm::<f64>::new(3);
        bn.gamma = rand_vec(&mut rng, 3);
        bn.beta = rand_vec(&mut rng, 3);
        bn.running_mean = rand_vec(&mut rng, 3);
        bn.running_var = vec![0.5, 1.5, 2.0];
        let x = Tensor::from_vec([2, 3, 3, 3], rand_vec(&mut rng, 54)).unwrap();
        let probe = rand_vec(&mut rng, 54);
        for use_batch in [true, false] {
            let (_, cache, _) = batch_norm(&bn, &x, use_batch, 1e-3);
            let g = batch_norm_backward(&bn, &cache, &Tensor::from_vec(x.shape(), probe.clone()).unwrap());
            let h = 1e-6;
            for idx in 0..54 {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let up = scalar_of(&batch_norm(&bn, &xp, use_batch, 1e-3).0, &probe);
                xp.data_mut()[idx] -= 2.0 * h;
                let down = scalar_of(&batch_norm(&bn, &xp, use_batch, 1e-3).0, &probe);
                assert!((g.input.data()[idx] - (up - down) / (2.0 * h)).abs() < 1e-6);
            }
            for ch in 0..3 {
                let mut p = bn.clone();
                p.gamma[ch] += h;
                let up = scalar_of(&batch_norm(&p, &x, use_batch, 1e-3).0, &probe);
                p.gamma[ch] -= 2.0 * h;
                let down = scalar_of(&batch_norm(&p, &x, use_batch, 1e-3).0, &probe);
                assert!((g.gamma[ch] - (up - down) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_norm_uses_biased_batch_variance() {
        let bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec([2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let (y, _, stats) = batch_norm(&bn, &x, true, 0.0);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![4.0]);
        assert_eq!(stats.var, vec![5.0]);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn activations_and_resampling() {
        let mut t = Tensor::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        leaky_relu(&mut t, 0.2);
        assert_eq!(t.data(), &[-0.2, 0.0, 2.0]);

        let m = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = upsample2(&m);
        assert_eq!(up.shape(), [1, 1, 4, 4]);
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
        let back = upsample2_backward(&up);
        assert_eq!(back.data(), &[4.0, 0.0, 0.0, 4.0]);

        let a = Tensor::<f64>::zeros([2, 3, 4, 4]);
        let b = Tensor::<f64>::filled([2, 5, 4, 4], 1.0);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.c(), 8);
        let (sa, sb) = split_channels(&cat, 3);
        assert_eq!((sa, sb), (a, b));
        assert!(concat_channels(&Tensor::<f64>::zeros([1, 1, 4, 4]), &Tensor::zeros([1, 1, 2, 2])).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let conv = Conv::<f64>::zeros(2, 1, 3, 1, 1);
        let x = Tensor::zeros([1, 3, 4, 4]);
        assert!(partial_conv(&conv, &x, &x, false).is_err());
        let m = Tensor::zeros([1, 3, 4, 5]);
        assert!(partial_conv(&conv, &x, &m, false).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mask_update_ignores_values_and_is_idempotent(seed in 0u64..1_000_000, k in prop::sample::select(vec![3usize, 5, 7])) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let conv = rand_conv(&mut rng, 2, 2, k, 1);
            let mv: Vec<f64> = (0..2 * 64).map(|_| if rng.random_bool(0.1) { 1.0 } else { 0.0 }).collect();
            let m = Tensor::from_vec([1, 2, 8, 8], mv).unwrap();
            let x1 = Tensor::from_vec([1, 2, 8, 8], rand_vec(&mut rng, 128)).unwrap();
            let x2 = Tensor::from_vec([1, 2, 8, 8], rand_vec(&mut rng, 128)).unwrap();
            let (_, m1, _) = partial_conv(&conv, &x1, &m, false).unwrap();
            let (_, m2, _) = partial_conv(&conv, &x2, &m, false).unwrap();
            prop_assert_eq!(&m1, &m2);
            let (_, again, _) = partial_conv(&conv, &x1, &m1, false).unwrap();
            let (_, twice, _) = partial_conv(&conv, &x1, &again, false).unwrap();
            // Once a window is covered it stays covered.
            for (a, b) in m1.data().iter().zip(again.data()) {
                prop_assert!(b >= a);
            }
            prop_assert!(twice.data().iter().zip(again.data()).all(|(t, a)| t >= a));
            let full = Tensor::filled([1, 2, 8, 8], 1.0);
            let (_, fm, _) = partial_conv(&conv, &x1, &full, false).unwrap();
            let (_, fm2, _) = partial_conv(&conv, &x1, &fm, false).unwrap();
            prop_assert_eq!(fm, fm2);
        }

        #[test]
        fn stride_two_mask_covers_subsampled_windows(seed in 0u64..1_000_000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let conv = rand_conv(&mut rng, 1, 1, 5, 2);
            let mv: Vec<f64> = (0..64).map(|_| if rng.random_bool(0.05) { 1.0 } else { 0.0 }).collect();
            let m = Tensor::from_vec([1, 1, 8, 8], mv).unwrap();
            let x = Tensor::from_vec([1, 1, 8, 8], rand_vec(&mut rng, 64)).unwrap();
            let (_, om, _) = partial_conv(&conv, &x, &m, false).unwrap();
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut any = false;
                    for dy in 0..5isize {
                        for dx in 0..5isize {
                            let y = oy as isize * 2 + dy - 2;
                            let xx = ox as isize * 2 + dx - 2;
                            if (0..8).contains(&y) && (0..8).contains(&xx) {
                                any |= m.at(0, 0, y as usize, xx as usize) == 1.0;
                            }
                        }
                    }
                    prop_assert_eq!(om.at(0, 0, oy, ox) == 1.0, any);
                }
            }
        }
    }
}
