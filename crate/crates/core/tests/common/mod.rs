#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng as _;
use soundfield::modal::{Damping, RoomSpec};
use soundfield::nn::{Conv, Mode, Tensor, UNetConfig, UNetWeights};
use soundfield::rng::stream;

/// Plain `[n][c][h][w]` array for the reference network.
#[derive(Debug, Clone)]
pub struct Array4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Array4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let [n, c, h, w] = t.shape();
        Self {
            n,
            c,
            h,
            w,
            data: t.data().to_vec(),
        }
    }

    fn idx(&self, b: usize, ch: usize, y: usize, x: usize) -> usize {
        ((b * self.c + ch) * self.h + y) * self.w + x
    }

    pub fn get(&self, b: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(b, ch, y, x)]
    }

    pub fn set(&mut self, b: usize, ch: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(b, ch, y, x);
        self.data[i] = v;
    }
}

fn conv_weight(conv: &Conv<f64>, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
    conv.weight[((co * conv.cin + ci) * conv.kernel + ky) * conv.kernel + kx]
}

/// Direct partial convolution: `W . (X * M) * sum(1) / sum(M) + b` for windows with
/// any valid cell, zero elsewhere. Cells outside the image count as invalid.
pub fn naive_partial_conv(conv: &Conv<f64>, x: &Array4, m: &Array4) -> (Array4, Array4) {
    let k = conv.kernel;
    let ho = (x.h + 2 * conv.pad - k) / conv.stride + 1;
    let wo = (x.w + 2 * conv.pad - k) / conv.stride + 1;
    let mut out = Array4::zeros(x.n, conv.cout, ho, wo);
    let mut out_mask = Array4::zeros(x.n, conv.cout, ho, wo);
    let full = (conv.cin * k * k) as f64;
    for b in 0..x.n {
        for co in 0..conv.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    let mut valid = 0.0;
                    for ci in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let xx = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if y < 0 || xx < 0 || y >= x.h as isize || xx >= x.w as isize {
                                    continue;
                                }
                                let (y, xx) = (y as usize, xx as usize);
                                let mv = m.get(b, ci, y, xx);
                                s += conv_weight(conv, co, ci, ky, kx) * x.get(b, ci, y, xx) * mv;
                                valid += mv;
                            }
                        }
                    }
                    if valid > 0.0 {
                        out.set(b, co, oy, ox, s * full / valid + conv.bias[co]);
                        out_mask.set(b, co, oy, ox, 1.0);
                    }
                }
            }
        }
    }
    (out, out_mask)
}

/// Ordinary zero-padded convolution without any mask.
pub fn naive_dense_conv(conv: &Conv<f64>, x: &Array4) -> Array4 {
    let ones = Array4 {
        data: vec![1.0; x.data.len()],
        ..x.clone()
    };
    let k = conv.kernel;
    let ho = (x.h + 2 * conv.pad - k) / conv.stride + 1;
    let wo = (x.w + 2 * conv.pad - k) / conv.stride + 1;
    let mut out = Array4::zeros(x.n, conv.cout, ho, wo);
    for b in 0..x.n {
        for co in 0..conv.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = conv.bias[co];
                    for ci in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let xx = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if y >= 0 && xx >= 0 && y < x.h as isize && xx < x.w as isize {
                                    s += conv_weight(conv, co, ci, ky, kx)
                                        * x.get(b, ci, y as usize, xx as usize)
                                        * ones.get(b, ci, y as usize, xx as usize);
                                }
                            }
                        }
                    }
                    out.set(b, co, oy, ox, s);
                }
            }
        }
    }
    out
}

fn naive_batch_norm(bn: &soundfield::nn::BatchNorm<f64>, x: &mut Array4, batch: bool, eps: f64) {
    for ch in 0..x.c {
        let (mean, var) = if batch {
            let mut vals = Vec::new();
            for b in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        vals.push(x.get(b, ch, y, xx));
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (mean, var)
        } else {
            (bn.running_mean[ch], bn.running_var[ch])
        };
        for b in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.get(b, ch, y, xx) - mean) / (var + eps).sqrt();
                    x.set(b, ch, y, xx, bn.gamma[ch] * v + bn.beta[ch]);
                }
            }
        }
    }
}

fn activate(x: &mut Array4, slope: f64) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

fn upsample(x: &Array4) -> Array4 {
    let mut out = Array4::zeros(x.n, x.c, 2 * x.h, 2 * x.w);
    for b in 0..x.n {
        for ch in 0..x.c {
            for y in 0..2 * x.h {
                for xx in 0..2 * x.w {
                    out.set(b, ch, y, xx, x.get(b, ch, y / 2, xx / 2));
                }
            }
        }
    }
    out
}

fn concat(a: &Array4, b: &Array4) -> Array4 {
    let mut out = Array4::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        for ch in 0..a.c + b.c {
            for y in 0..a.h {
                for x in 0..a.w {
                    let v = if ch < a.c { a.get(n, ch, y, x) } else { b.get(n, ch - a.c, y, x) };
                    out.set(n, ch, y, x, v);
                }
            }
        }
    }
    out
}

/// Reference forward pass of the U-Net written with plain loops.
pub fn naive_unet(weights: &UNetWeights<f64>, x: &Array4, m: &Array4, mode: Mode) -> Array4 {
    let cfg = &weights.config;
    let eps = cfg.bn_eps;
    let mut skips = vec![(x.clone(), m.clone())];
    for (s, stage) in weights.encoder.iter().enumerate() {
        let (xin, min) = &skips[s];
        let (mut y, ym) = naive_partial_conv(&stage.conv, xin, min);
        if let Some(bn) = &stage.bn {
            naive_batch_norm(bn, &mut y, mode == Mode::Train, eps);
        }
        activate(&mut y, 0.0);
        skips.push((y, ym));
    }
    let (mut cur, mut cur_mask) = skips[cfg.depth].clone();
    for level in (0..cfg.depth).rev() {
        let (skip, skip_mask) = &skips[level];
        let cat = concat(&upsample(&cur), skip);
        let cat_mask = concat(&upsample(&cur_mask), skip_mask);
        let stage = &weights.decoder[level];
        let (mut y, ym) = naive_partial_conv(&stage.conv, &cat, &cat_mask);
        if let Some(bn) = &stage.bn {
            naive_batch_norm(bn, &mut y, mode != Mode::Inference, eps);
        }
        activate(&mut y, cfg.leaky_slope);
        cur = y;
        cur_mask = ym;
    }
    let head = &weights.head;
    let mut out = Array4::zeros(cur.n, head.cout, cur.h, cur.w);
    for b in 0..cur.n {
        for co in 0..head.cout {
            for y in 0..cur.h {
                for xx in 0..cur.w {
                    let mut s = head.bias[co];
                    for ci in 0..head.cin {
                        s += head.weight[co * head.cin + ci] * cur.get(b, ci, y, xx);
                    }
                    out.set(b, co, y, xx, 1.0 / (1.0 + (-s).exp()));
                }
            }
        }
    }
    out
}

/// Small network on `spatial x spatial x channels` inputs.
pub fn toy_config(depth: usize, base: usize, channels: usize, spatial: usize) -> UNetConfig {
    UNetConfig {
        in_channels: channels,
        out_channels: channels,
        spatial,
        ..UNetConfig::with_depth(depth, base)
    }
}

/// Weights with every block, including biases and running statistics, randomised.
pub fn random_weights(cfg: &UNetConfig, seed: u64) -> UNetWeights<f64> {
    let mut w = UNetWeights::<f64>::init(cfg, &mut stream(seed, 0)).unwrap();
    let mut rng = stream(seed, 1);
    w.visit_all_mut(|_, v| {
        for x in v.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    });
    for stage in w.encoder.iter_mut().chain(w.decoder.iter_mut()) {
        if let Some(bn) = &mut stage.bn {
            for v in &mut bn.running_var {
                *v = rng.random_range(0.5..1.5);
            }
            for g in &mut bn.gamma {
                *g = rng.random_range(0.5..1.5);
            }
        }
    }
    w
}

/// Random inputs and a random shared-across-channels binary mask.
pub fn random_batch(n: usize, c: usize, spatial: usize, seed: u64, density: f64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = stream(seed, 2);
    let len = n * c * spatial * spatial;
    let x: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
    let mut m = vec![0.0; len];
    let plane = spatial * spatial;
    for b in 0..n {
        let keep: Vec<bool> = (0..plane).map(|_| rng.random::<f64>() < density).collect();
        for ch in 0..c {
            for p in 0..plane {
                m[(b * c + ch) * plane + p] = if keep[p] { 1.0 } else { 0.0 };
            }
        }
    }
    (
        Tensor::from_vec([n, c, spatial, spatial], x).unwrap(),
        Tensor::from_vec([n, c, spatial, spatial], m).unwrap(),
    )
}

/// Green's function by direct summation over every `(n_x, n_y)` pair with a
/// resonance below `f_max`, both points on the floor plane.
pub fn naive_greens(room: &RoomSpec, receiver: (f64, f64), omega: f64, f_max: f64, damping: Damping) -> Complex64 {
    let c = room.c;
    let tau = room.t60 / (3.0 * 10f64.ln());
    let mut sum = Complex64::new(0.0, 0.0);
    let limit = |l: f64| (2.0 * f_max * l / c).ceil() as u32 + 1;
    for nx in 0..=limit(room.l_x) {
        for ny in 0..=limit(room.l_y) {
            let fx = nx as f64 / (2.0 * room.l_x);
            let fy = ny as f64 / (2.0 * room.l_y);
            let f_n = c * (fx * fx + fy * fy).sqrt();
            if f_n >= f_max {
                continue;
            }
            let eps = |n: u32| if n == 0 { 1.0_f64 } else { 2.0 };
            let lambda = (eps(nx) * eps(ny)).sqrt();
            let psi = |p: (f64, f64)| {
                lambda * (nx as f64 * PI * p.0 / room.l_x).cos() * (ny as f64 * PI * p.1 / room.l_y).cos()
            };
            let omega_n = 2.0 * PI * f_n;
            let imag = match damping {
                Damping::Dimensional => omega / (tau * c * c),
                Damping::AsPrinted => omega / tau,
            };
            let denom = Complex64::new((omega / c).powi(2) - (omega_n / c).powi(2), -imag);
            sum += psi(receiver) * psi(room.source) / denom;
        }
    }
    -sum / (room.l_x * room.l_y * room.l_z)
}
