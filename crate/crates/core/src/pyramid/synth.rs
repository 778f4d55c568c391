//! Deterministic synthetic slides with planted tumor blobs.
//!
//! The highest level is painted directly; every other level is an exact
//! block-mean of it. Tumor blobs carry a class-specific texture on top of a
//! darker stain; optional decoys share the stain but not the texture, so they
//! are only separable from tumor at magnifications that resolve texture.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BinaryMask, FloatMap, MagnificationLevel, MagnificationPyramid, PyramidError, Result, SlideLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub levels: usize,
    /// Side of the highest level in pixels.
    pub base_size: u32,
    /// Magnification ratio between adjacent levels.
    pub level_factor: u32,
    pub top_magnification: f64,
    pub label: SlideLabel,
    /// Inclusive range for the number of tumor blobs.
    pub blob_count: (usize, usize),
    /// Inclusive band for the total tumor area fraction.
    pub tumor_fraction: (f64, f64),
    pub decoy_count: (usize, usize),
    /// Area fraction of a single decoy.
    pub decoy_fraction: (f64, f64),
    pub fixations_per_level: usize,
    pub off_tumor_probability: f64,
    /// Gaussian fixation width as a fraction of the level side.
    pub fixation_sigma: f64,
    pub slide_id: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            base_size: 512,
            level_factor: 2,
            top_magnification: 10.0,
            label: SlideLabel::Nevus,
            blob_count: (1, 4),
            tumor_fraction: (0.02, 0.3),
            decoy_count: (0, 0),
            decoy_fraction: (0.005, 0.015),
            fixations_per_level: 24,
            off_tumor_probability: 0.1,
            fixation_sigma: 0.025,
            slide_id: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field, message: String| Err(PyramidError::Config { field, message });
        if self.levels == 0 {
            return err("levels", "at least one level is required".into());
        }
        if self.level_factor < 2 {
            return err("level_factor", format!("factor {} must be at least 2", self.level_factor));
        }
        let total = (self.level_factor as u64).checked_pow(self.levels as u32 - 1);
        match total {
            Some(t) if self.base_size as u64 % t == 0 && self.base_size as u64 >= t => {}
            _ => {
                return err(
                    "base_size",
                    format!(
                        "base size {} is not divisible by level_factor^(levels-1) = {}^{}",
                        self.base_size,
                        self.level_factor,
                        self.levels - 1
                    ),
                )
            }
        }
        if !(self.top_magnification > 0.0) {
            return err("top_magnification", "must be positive".into());
        }
        if self.blob_count.0 > self.blob_count.1 {
            return err("blob_count", "min exceeds max".into());
        }
        let (lo, hi) = self.tumor_fraction;
        if !(lo > 0.0 && lo <= hi && hi < 0.6) {
            return err("tumor_fraction", format!("band [{lo}, {hi}] must satisfy 0 < lo <= hi < 0.6"));
        }
        if self.decoy_count.0 > self.decoy_count.1 {
            return err("decoy_count", "min exceeds max".into());
        }
        if !(0.0..=1.0).contains(&self.off_tumor_probability) {
            return err("off_tumor_probability", "must lie in [0, 1]".into());
        }
        if !(self.fixation_sigma > 0.0) {
            return err("fixation_sigma", "must be positive".into());
        }
        Ok(())
    }

    pub fn level_layout(&self) -> Vec<MagnificationLevel> {
        let n = self.levels;
        (0..n)
            .map(|i| {
                let down = (self.level_factor as u64).pow((n - 1 - i) as u32);
                let side = (self.base_size as u64 / down) as u32;
                MagnificationLevel {
                    index: i,
                    magnification: self.top_magnification / down as f64,
                    width: side,
                    height: side,
                    scale_to_base: down as f64,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn sample_inside(&self, rng: &mut impl Rng) -> (f64, f64) {
        let r = rng.random::<f64>().sqrt();
        let t = rng.random::<f64>() * 2.0 * PI;
        let u = r * t.cos() * self.a;
        let v = r * t.sin() * self.b;
        (self.cx + u * self.cos - v * self.sin, self.cy + u * self.sin + v * self.cos)
    }
}

fn place_ellipses(
    rng: &mut impl Rng,
    fractions: &[f64],
    avoid: &[Ellipse],
) -> Option<Vec<Ellipse>> {
    let mut placed: Vec<Ellipse> = Vec::new();
    for &f in fractions {
        let ratio = rng.random_range(0.6..1.0);
        let a = (f / (PI * ratio)).sqrt();
        let b = a * ratio;
        let theta = rng.random::<f64>() * PI;
        let margin = a + 0.02;
        if margin >= 0.5 {
            return None;
        }
        let mut ok = None;
        for _ in 0..200 {
            let cx = rng.random_range(margin..1.0 - margin);
            let cy = rng.random_range(margin..1.0 - margin);
            let clear = placed
                .iter()
                .chain(avoid)
                .all(|e| ((e.cx - cx).powi(2) + (e.cy - cy).powi(2)).sqrt() > e.a + a + 0.01);
            if clear {
                ok = Some(Ellipse {
                    cx,
                    cy,
                    a,
                    b,
                    cos: theta.cos(),
                    sin: theta.sin(),
                });
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

fn split_fraction(rng: &mut impl Rng, total: f64, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| total * v / s).collect()
}

/// Class texture in [-1, 1] at base pixel (x, y) relative to the blob center.
fn class_texture(label: SlideLabel, x: f64, y: f64, e: &Ellipse, size: f64) -> f64 {
    match label {
        SlideLabel::Nevus => {
            let p = 8.0;
            let v = (2.0 * PI * x / p).cos() * (2.0 * PI * y / p).cos();
            if v > 0.25 {
                1.0
            } else {
                -0.6
            }
        }
        SlideLabel::Bcc => {
            let p = 6.0;
            let t = x * e.cos + y * e.sin;
            (2.0 * PI * t / p).sin().signum()
        }
        SlideLabel::Melanoma => {
            let h = hash2(x as i64 / 3, y as i64 / 3);
            2.0 * h - 1.0
        }
        SlideLabel::Scc => {
            let r = ((x - e.cx * size).powi(2) + (y - e.cy * size).powi(2)).sqrt();
            (2.0 * PI * r / 7.0).cos()
        }
    }
}

fn hash2(x: i64, y: i64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn class_tint(label: SlideLabel) -> [f64; 3] {
    match label {
        SlideLabel::Nevus => [118.0, 72.0, 150.0],
        SlideLabel::Bcc => [100.0, 70.0, 160.0],
        SlideLabel::Melanoma => [120.0, 78.0, 112.0],
        SlideLabel::Scc => [140.0, 86.0, 150.0],
    }
}

const BACKGROUND: [f64; 3] = [234.0, 196.0, 214.0];
const DECOY: [f64; 3] = [124.0, 76.0, 146.0];

/// Generates a deterministic slide for `(seed, config)`.
pub fn generate_synthetic_slide(seed: u64, config: &SynthConfig) -> Result<MagnificationPyramid> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.base_size as usize;
    let sizef = size as f64;
    let levels = config.level_layout();

    let n_blobs = rng.random_range(config.blob_count.0..=config.blob_count.1);
    let (lo, hi) = config.tumor_fraction;
    let mut blobs = Vec::new();
    let mut mask = BinaryMask::zeros(size, size);
    if n_blobs > 0 {
        let mut accepted = false;
        for _ in 0..50 {
            let target = rng.random_range(lo + 0.05 * (hi - lo)..=hi - 0.05 * (hi - lo));
            let fractions = split_fraction(&mut rng, target, n_blobs);
            let Some(cand) = place_ellipses(&mut rng, &fractions, &[]) else {
                continue;
            };
            let m = rasterize(&cand, size);
            let f = m.fraction();
            if f >= lo && f <= hi {
                blobs = cand;
                mask = m;
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(PyramidError::Config {
                field: "tumor_fraction",
                message: format!("could not place {n_blobs} blobs inside band [{lo}, {hi}]"),
            });
        }
    }

    let n_decoys = rng.random_range(config.decoy_count.0..=config.decoy_count.1);
    let mut decoys = Vec::new();
    if n_decoys > 0 {
        let fr: Vec<f64> = (0..n_decoys)
            .map(|_| rng.random_range(config.decoy_fraction.0..=config.decoy_fraction.1))
            .collect();
        if let Some(d) = place_ellipses(&mut rng, &fr, &blobs) {
            decoys = d;
        }
    }

    // Low-frequency stain variation.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..4.0),
                rng.random::<f64>() * 2.0 * PI,
                rng.random_range(3.0..8.0),
            )
        })
        .collect();
    let noise = Normal::new(0.0, 5.0).expect("valid normal");
    let tint = class_tint(config.label);
    let mut base = vec![0.0f64; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = ((x as f64 + 0.5) / sizef, (y as f64 + 0.5) / sizef);
            let low: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (2.0 * PI * (kx * fx + ky * fy) + ph).sin())
                .sum();
            let mut color = BACKGROUND;
            if mask.get(x, y) {
                let e = blobs.iter().find(|e| e.contains(fx, fy)).unwrap_or(&blobs[0]);
                let t = class_texture(config.label, x as f64, y as f64, e, sizef);
                for c in 0..3 {
                    color[c] = tint[c] + 32.0 * t;
                }
            } else if decoys.iter().any(|e| e.contains(fx, fy)) {
                color = DECOY;
            }
            for c in 0..3 {
                let v = color[c] + low + noise.sample(&mut rng);
                base[(y * size + x) * 3 + c] = v.clamp(0.0, 255.0).round();
            }
        }
    }

    let mut rasters = Vec::with_capacity(levels.len());
    for lvl in &levels {
        let f = lvl.scale_to_base as usize;
        let down = if f == 1 {
            base.clone()
        } else {
            super::block_mean(&base, size, size, 3, f)
        };
        let side = size / f;
        let mut img = RgbImage::new(side as u32, side as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            *px = Rgb([
                down[i * 3].round() as u8,
                down[i * 3 + 1].round() as u8,
                down[i * 3 + 2].round() as u8,
            ]);
        }
        rasters.push(img);
    }

    let mut nav = Vec::with_capacity(levels.len());
    for lvl in &levels {
        let side = lvl.width as usize;
        let mut g = FloatMap::zeros(side, side);
        let sigma = (config.fixation_sigma * side as f64).max(0.5);
        for _ in 0..config.fixations_per_level {
            let outside = blobs.is_empty() || rng.random::<f64>() < config.off_tumor_probability;
            let (px, py) = if outside {
                sample_outside(&mut rng, &blobs)
            } else {
                let k = rng.random_range(0..blobs.len());
                blobs[k].sample_inside(&mut rng)
            };
            splat(&mut g, px * side as f64, py * side as f64, sigma);
        }
        g.max_normalize();
        nav.push(g);
    }

    let slide_id = config
        .slide_id
        .clone()
        .unwrap_or_else(|| format!("synth-{seed:06}"));
    MagnificationPyramid::new(slide_id, levels, rasters, Some(nav), Some(mask), Some(config.label))
}

fn rasterize(blobs: &[Ellipse], size: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(size, size);
    let s = size as f64;
    for e in blobs {
        let x0 = (((e.cx - e.a) * s).floor().max(0.0)) as usize;
        let x1 = (((e.cx + e.a) * s).ceil() as usize).min(size);
        let y0 = (((e.cy - e.a) * s).floor().max(0.0)) as usize;
        let y1 = (((e.cy + e.a) * s).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                if e.contains((x as f64 + 0.5) / s, (y as f64 + 0.5) / s) {
                    m.data[y * size + x] = 1;
                }
            }
        }
    }
    m
}

fn sample_outside(rng: &mut impl Rng, blobs: &[Ellipse]) -> (f64, f64) {
    let mut p = (rng.random::<f64>(), rng.random::<f64>());
    for _ in 0..100 {
        if !blobs.iter().any(|e| e.contains(p.0, p.1)) {
            break;
        }
        p = (rng.random::<f64>(), rng.random::<f64>());
    }
    p
}

fn splat(g: &mut FloatMap, cx: f64, cy: f64, sigma: f64) {
    let r = (3.0 * sigma).ceil() as i64;
    let (w, h) = (g.width as i64, g.height as i64);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (ix, iy) = (cx.floor() as i64, cy.floor() as i64);
    for y in (iy - r).max(0)..=(iy + r).min(h - 1) {
        for x in (ix - r).max(0)..=(ix + r).min(w - 1) {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let v = (-(dx * dx + dy * dy) * inv).exp();
            g.data[(y * w + x) as usize] += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            base_size: 128,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_slide(3, &small()).unwrap();
        let b = generate_synthetic_slide(3, &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_slide(4, &small()).unwrap();
        assert_ne!(a.rasters[4], c.rasters[4]);
    }

    #[test]
    fn zero_blobs() {
        let cfg = SynthConfig {
            blob_count: (0, 0),
            ..small()
        };
        let p = generate_synthetic_slide(1, &cfg).unwrap();
        assert_eq!(p.tumor_mask.as_ref().unwrap().count(), 0);
        for g in p.nav_annotations.as_ref().unwrap() {
            assert_eq!(g.max(), 1.0);
        }
    }

    #[test]
    fn nav_peaks_at_one() {
        let p = generate_synthetic_slide(11, &small()).unwrap();
        for g in p.nav_annotations.as_ref().unwrap() {
            assert_eq!(g.max(), 1.0);
            assert!(g.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn no_fixations_gives_zero_nav() {
        let cfg = SynthConfig {
            fixations_per_level: 0,
            ..small()
        };
        let p = generate_synthetic_slide(2, &cfg).unwrap();
        assert!(p.nav_annotations.unwrap().iter().all(|g| g.max() == 0.0));
    }

    #[test]
    fn indivisible_base_is_config_error() {
        let cfg = SynthConfig {
            base_size: 100,
            ..SynthConfig::default()
        };
        match generate_synthetic_slide(1, &cfg) {
            Err(PyramidError::Config { field, .. }) => assert_eq!(field, "base_size"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn default_layout_magnifications() {
        let lv = SynthConfig::default().level_layout();
        let mags: Vec<f64> = lv.iter().map(|l| l.magnification).collect();
        assert_eq!(mags, vec![0.625, 1.25, 2.5, 5.0, 10.0]);
        assert_eq!(lv[0].width * 16, lv[4].width);
    }

    #[test]
    fn tumor_fraction_in_band_seed7_2048() {
        let cfg = SynthConfig {
            base_size: 2048,
            levels: 5,
            ..SynthConfig::default()
        };
        let p = generate_synthetic_slide(7, &cfg).unwrap();
        let mask = p.tumor_mask.as_ref().unwrap();
        let counted = mask.data.iter().filter(|&&v| v == 1).count() as f64 / (2048.0 * 2048.0);
        assert!((0.02..=0.3).contains(&counted), "fraction {counted}");
    }

    #[test]
    fn levels_are_block_means_of_base() {
        let p = generate_synthetic_slide(5, &small()).unwrap();
        let top = &p.rasters[4];
        let lvl3 = &p.rasters[3];
        for &(x, y) in &[(0u32, 0u32), (10, 17), (63, 63)] {
            for c in 0..3 {
                let s: u32 = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (dx, dy)))
                    .map(|(dx, dy)| top.get_pixel(2 * x + dx, 2 * y + dy)[c] as u32)
                    .sum();
                let expect = (s as f64 / 4.0).round() as i32;
                assert!((lvl3.get_pixel(x, y)[c] as i32 - expect).abs() <= 0);
            }
        }
    }
}
