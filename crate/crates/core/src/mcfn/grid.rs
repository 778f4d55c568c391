//! Token-grid resampling between neighboring magnifications.
//!
//! Downsampling is an integer block-mean, upsampling is bilinear with
//! half-cell alignment. Both are separable linear maps, so the adjoint used in
//! backprop reuses the same weights.

use crate::encoder::TokenGrid;

use super::{McfnError, Result};

type AxisWeights = Vec<Vec<(usize, f64)>>;

fn axis_weights(src: usize, dst: usize) -> Result<AxisWeights> {
    if src == 0 || dst == 0 {
        return Err(McfnError::Resample("empty grid axis".into()));
    }
    if src == dst {
        return Ok((0..dst).map(|i| vec![(i, 1.0)]).collect());
    }
    if src > dst {
        if src % dst != 0 {
            return Err(McfnError::Resample(format!(
                "cannot block-average {src} cells onto {dst}: factor is not an integer"
            )));
        }
        let k = src / dst;
        let w = 1.0 / k as f64;
        return Ok((0..dst).map(|i| (i * k..(i + 1) * k).map(|s| (s, w)).collect()).collect());
    }
    let ratio = src as f64 / dst as f64;
    Ok((0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let t = pos - lo as f64;
            if t == 0.0 || lo + 1 >= src {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - t), (lo + 1, t)]
            }
        })
        .collect())
}

/// Linear map from a `(src_h, src_w)` grid to `(dst_h, dst_w)`.
#[derive(Debug, Clone)]
pub struct GridResampler {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    wy: AxisWeights,
    wx: AxisWeights,
}

impl GridResampler {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        Ok(Self {
            src,
            dst,
            wy: axis_weights(src.0, dst.0)?,
            wx: axis_weights(src.1, dst.1)?,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn apply(&self, data: &[f64], dim: usize) -> Vec<f64> {
        if self.is_identity() {
            return data.to_vec();
        }
        let (_, sw) = self.src;
        let (dh, dw) = self.dst;
        let mut out = vec![0.0; dh * dw * dim];
        for (oy, wy) in self.wy.iter().enumerate() {
            for (ox, wx) in self.wx.iter().enumerate() {
                let o = &mut out[(oy * dw + ox) * dim..(oy * dw + ox + 1) * dim];
                for &(sy, a) in wy {
                    for &(sx, b) in wx {
                        let s = &data[(sy * sw + sx) * dim..(sy * sw + sx + 1) * dim];
                        let w = a * b;
                        for (v, x) in o.iter_mut().zip(s) {
                            *v += w * x;
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates the transpose map of `grad` (destination-shaped) into `acc`.
    pub fn adjoint_acc(&self, grad: &[f64], dim: usize, acc: &mut [f64]) {
        if self.is_identity() {
            for (a, g) in acc.iter_mut().zip(grad) {
                *a += g;
            }
            return;
        }
        let (_, sw) = self.src;
        let (_, dw) = self.dst;
        for (oy, wy) in self.wy.iter().enumerate() {
            for (ox, wx) in self.wx.iter().enumerate() {
                let g = &grad[(oy * dw + ox) * dim..(oy * dw + ox + 1) * dim];
                for &(sy, a) in wy {
                    for &(sx, b) in wx {
                        let s = &mut acc[(sy * sw + sx) * dim..(sy * sw + sx + 1) * dim];
                        let w = a * b;
                        for (v, x) in s.iter_mut().zip(g) {
                            *v += w * x;
                        }
                    }
                }
            }
        }
    }
}

/// Resamples a token grid to `target = (rows, cols)`. Token dimension is unchanged.
pub fn resample_grid(x: &TokenGrid, target: (usize, usize)) -> Result<TokenGrid> {
    let r = GridResampler::new((x.grid_h, x.grid_w), target)?;
    let data = r.apply(&x.data, x.dim);
    Ok(TokenGrid {
        grid_h: target.0,
        grid_w: target.1,
        dim: x.dim,
        data,
        level_index: x.level_index,
        cell_size: (
            x.cell_size.0 * x.grid_w as f64 / target.1 as f64,
            x.cell_size.1 * x.grid_h as f64 / target.0 as f64,
        ),
    })
}
