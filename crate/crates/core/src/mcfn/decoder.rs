//! Convolutional decoder: three 3×3 convolutions with SiLU and 2× nearest
//! upsampling between them, a sigmoid head, then nearest replication up to the
//! heatmap resolution.

use serde::{Deserialize, Serialize};

/// 3×3 same-padded convolution, weights `(out, in, 3, 3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![0.0; out_ch * in_ch * 9],
            bias: vec![0.0; out_ch],
        }
    }

    /// Input and output are `(channels, h, w)`.
    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let mut out = vec![0.0; self.out_ch * hw];
        for o in 0..self.out_ch {
            let plane = &mut out[o * hw..(o + 1) * hw];
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_ch {
                let src = &input[i * hw..(i + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wt = self.weight[((o * self.in_ch + i) * 3 + ky) * 3 + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        let (y0, y1) = valid_range(ky, h);
                        let (x0, x1) = valid_range(kx, w);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let dst = &mut plane[y * w + x0..y * w + x1];
                            let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (d, v) in dst.iter_mut().zip(s) {
                                *d += wt * v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, input: &[f64], grad_out: &[f64], h: usize, w: usize, grads: &mut Conv3x3) -> Vec<f64> {
        let hw = h * w;
        let mut grad_in = vec![0.0; self.in_ch * hw];
        for o in 0..self.out_ch {
            let g = &grad_out[o * hw..(o + 1) * hw];
            grads.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_ch {
                let src = &input[i * hw..(i + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((o * self.in_ch + i) * 3 + ky) * 3 + kx;
                        let wt = self.weight[widx];
                        let (y0, y1) = valid_range(ky, h);
                        let (x0, x1) = valid_range(kx, w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let gr = &g[y * w + x0..y * w + x1];
                            let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                            if wt != 0.0 {
                                let gi = &mut grad_in[i * hw + sy * w + x0 + kx - 1..i * hw + sy * w + x1 + kx - 1];
                                for (d, a) in gi.iter_mut().zip(gr) {
                                    *d += wt * a;
                                }
                            }
                        }
                        grads.weight[widx] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

/// Output rows/cols whose kernel tap `k` lands inside the input.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1.min(n), n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Nearest-neighbor upsampling of `(c, h, w)` by an integer factor.
pub(crate) fn upsample_nearest(input: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &input[ch * h * w + (y / f) * w..ch * h * w + (y / f + 1) * w];
            let dst = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / f];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each f×f block.
pub(crate) fn upsample_nearest_adjoint(grad: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            let g = &grad[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            let dst = &mut out[ch * h * w + (y / f) * w..ch * h * w + (y / f + 1) * w];
            for (x, v) in g.iter().enumerate() {
                dst[x / f] += v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub conv3: Conv3x3,
}

impl DecoderParams {
    pub fn channels(dim: usize) -> (usize, usize) {
        ((dim / 2).max(1), (dim / 4).max(1))
    }

    pub fn zeros(dim: usize) -> Self {
        let (c1, c2) = Self::channels(dim);
        Self {
            conv1: Conv3x3::zeros(dim, c1),
            conv2: Conv3x3::zeros(c1, c2),
            conv3: Conv3x3::zeros(c2, 1),
        }
    }
}

/// Saved activations for backprop.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    pub h: usize,
    pub w: usize,
    pub final_factor: usize,
    pub input: Vec<f64>,
    pub z1: Vec<f64>,
    pub u1: Vec<f64>,
    pub z2: Vec<f64>,
    pub u2: Vec<f64>,
    pub p: Vec<f64>,
}

/// `input` is `(dim, h, w)`; returns the `(h·4·f)²` probability map.
pub fn decoder_forward(dec: &DecoderParams, input: Vec<f64>, h: usize, w: usize, final_factor: usize) -> (Vec<f64>, DecoderCache) {
    let c1 = dec.conv1.out_ch;
    let c2 = dec.conv2.out_ch;
    let z1 = dec.conv1.forward(&input, h, w);
    let a1: Vec<f64> = z1.iter().map(|&v| silu(v)).collect();
    let u1 = upsample_nearest(&a1, c1, h, w, 2);
    let z2 = dec.conv2.forward(&u1, 2 * h, 2 * w);
    let a2: Vec<f64> = z2.iter().map(|&v| silu(v)).collect();
    let u2 = upsample_nearest(&a2, c2, 2 * h, 2 * w, 2);
    let z3 = dec.conv3.forward(&u2, 4 * h, 4 * w);
    let p: Vec<f64> = z3.iter().map(|&v| sigmoid(v)).collect();
    let out = if final_factor == 1 {
        p.clone()
    } else {
        upsample_nearest(&p, 1, 4 * h, 4 * w, final_factor)
    };
    let cache = DecoderCache {
        h,
        w,
        final_factor,
        input,
        z1,
        u1,
        z2,
        u2,
        p,
    };
    (out, cache)
}

/// Returns the `(dim, h, w)` input gradient.
pub fn decoder_backward(dec: &DecoderParams, cache: &DecoderCache, grad_out: &[f64], grads: &mut DecoderParams) -> Vec<f64> {
    let (h, w) = (cache.h, cache.w);
    let c1 = dec.conv1.out_ch;
    let c2 = dec.conv2.out_ch;
    let gp = if cache.final_factor == 1 {
        grad_out.to_vec()
    } else {
        upsample_nearest_adjoint(grad_out, 1, 4 * h, 4 * w, cache.final_factor)
    };
    let gz3: Vec<f64> = gp.iter().zip(&cache.p).map(|(g, p)| g * p * (1.0 - p)).collect();
    let gu2 = dec.conv3.backward(&cache.u2, &gz3, 4 * h, 4 * w, &mut grads.conv3);
    let ga2 = upsample_nearest_adjoint(&gu2, c2, 2 * h, 2 * w, 2);
    let gz2: Vec<f64> = ga2.iter().zip(&cache.z2).map(|(g, z)| g * silu_grad(*z)).collect();
    let gu1 = dec.conv2.backward(&cache.u1, &gz2, 2 * h, 2 * w, &mut grads.conv2);
    let ga1 = upsample_nearest_adjoint(&gu1, c1, h, w, 2);
    let gz1: Vec<f64> = ga1.iter().zip(&cache.z1).map(|(g, z)| g * silu_grad(*z)).collect();
    dec.conv1.backward(&cache.input, &gz1, h, w, &mut grads.conv1)
}
