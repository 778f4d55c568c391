//! Multi-magnification slide model.
//!
//! A slide is an ordered stack of co-registered RGB rasters, lowest
//! magnification (the thumbnail) first. Optional per-level navigation maps and
//! a single highest-level tumor mask travel with it. Lower-resolution masks are
//! derived on demand by block-max.

mod geometry;
mod io;
mod synth;

pub use geometry::{map_region, map_region_between, Region};
pub use io::{load_pyramid, save_pyramid, LevelEntry, Manifest, MANIFEST_FILE};
pub use synth::{generate_synthetic_slide, SynthConfig};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("level {0} not found in pyramid")]
    LevelNotFound(usize),
    #[error("invalid config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("manifest not found at {0}")]
    MissingManifest(PathBuf),
    #[error("dimension mismatch for {what}: expected {expected:?}, found {actual:?}")]
    DimensionMismatch {
        what: String,
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("value out of range in {what}: {detail}")]
    ValueOutOfRange { what: String, detail: String },
    #[error("invalid pyramid: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PyramidError>;

/// Diagnostic class of a slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideLabel {
    Nevus,
    Bcc,
    Melanoma,
    Scc,
}

impl SlideLabel {
    pub const ALL: [SlideLabel; 4] = [
        SlideLabel::Nevus,
        SlideLabel::Bcc,
        SlideLabel::Melanoma,
        SlideLabel::Scc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SlideLabel::Nevus => "nevus",
            SlideLabel::Bcc => "bcc",
            SlideLabel::Melanoma => "melanoma",
            SlideLabel::Scc => "scc",
        }
    }
}

impl fmt::Display for SlideLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SlideLabel {
    type Err = PyramidError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nevus" => Ok(SlideLabel::Nevus),
            "bcc" => Ok(SlideLabel::Bcc),
            "melanoma" => Ok(SlideLabel::Melanoma),
            "scc" => Ok(SlideLabel::Scc),
            other => Err(PyramidError::Invalid(format!("unknown slide label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnificationLevel {
    pub index: usize,
    pub magnification: f64,
    pub width: u32,
    pub height: u32,
    /// Highest magnification divided by this level's magnification.
    pub scale_to_base: f64,
}

/// Row-major real-valued single-channel map.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FloatMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "map data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Divides by the maximum so the peak is exactly 1. All-zero maps stay zero.
    pub fn max_normalize(&mut self) {
        let m = self.max();
        if m > 0.0 {
            for v in &mut self.data {
                *v /= m;
            }
        }
    }

    /// Area-averaging resample to an arbitrary size.
    pub fn resample_area(&self, width: usize, height: usize) -> FloatMap {
        let out = resample_area(&self.data, self.width, self.height, 1, width, height);
        FloatMap::from_vec(width, height, out)
    }
}

/// Binary mask with values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Renders the mask onto a `width`×`height` grid: a target cell is set when
    /// any source pixel it overlaps is set.
    pub fn block_max(&self, width: usize, height: usize) -> BinaryMask {
        let mut out = BinaryMask::zeros(width, height);
        let xs = overlap_spans(self.width, width);
        let ys = overlap_spans(self.height, height);
        for (ty, &(y0, y1)) in ys.iter().enumerate() {
            for (tx, &(x0, x1)) in xs.iter().enumerate() {
                let hit = (y0..y1).any(|y| (x0..x1).any(|x| self.get(x, y)));
                if hit {
                    out.data[ty * width + tx] = 1;
                }
            }
        }
        out
    }
}

/// Source pixel ranges with positive overlap for each target cell.
fn overlap_spans(src: usize, dst: usize) -> Vec<(usize, usize)> {
    (0..dst)
        .map(|i| {
            let lo = (i * src) / dst;
            let hi = ((i + 1) * src).div_ceil(dst);
            (lo, hi.max(lo + 1).min(src))
        })
        .collect()
}

/// Per-axis weights of the exact box filter mapping `src` samples onto `dst`.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            if src % dst == 0 {
                let k = src / dst;
                let w = 1.0 / k as f64;
                return (i * k..(i + 1) * k).map(|s| (s, w)).collect();
            }
            let a = i as f64 * scale;
            let b = (i + 1) as f64 * scale;
            let mut ws = Vec::new();
            let mut s = a.floor() as usize;
            while (s as f64) < b && s < src {
                let lo = a.max(s as f64);
                let hi = b.min((s + 1) as f64);
                if hi > lo {
                    ws.push((s, (hi - lo) / scale));
                }
                s += 1;
            }
            ws
        })
        .collect()
}

/// Separable area-averaging resample of an interleaved `channels`-channel image.
pub fn resample_area(
    data: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    assert_eq!(data.len(), width * height * channels);
    let wx = area_weights(width, out_w);
    let wy = area_weights(height, out_h);
    let mut rows = vec![0.0; height * out_w * channels];
    for y in 0..height {
        for (ox, ws) in wx.iter().enumerate() {
            for c in 0..channels {
                let mut acc = 0.0;
                for &(sx, w) in ws {
                    acc += w * data[(y * width + sx) * channels + c];
                }
                rows[(y * out_w + ox) * channels + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * channels];
    for (oy, ws) in wy.iter().enumerate() {
        for ox in 0..out_w {
            for c in 0..channels {
                let mut acc = 0.0;
                for &(sy, w) in ws {
                    acc += w * rows[(sy * out_w + ox) * channels + c];
                }
                out[(oy * out_w + ox) * channels + c] = acc;
            }
        }
    }
    out
}

/// Exact integer block-mean of a real-valued interleaved image.
pub fn block_mean(data: &[f64], width: usize, height: usize, channels: usize, factor: usize) -> Vec<f64> {
    assert!(factor > 0 && width % factor == 0 && height % factor == 0);
    let (ow, oh) = (width / factor, height / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; ow * oh * channels];
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..channels {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += data[((oy * factor + dy) * width + ox * factor + dx) * channels + c];
                    }
                }
                out[(oy * ow + ox) * channels + c] = acc * norm;
            }
        }
    }
    out
}

/// A slide as an ordered set of co-registered rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnificationPyramid {
    pub slide_id: String,
    pub levels: Vec<MagnificationLevel>,
    pub rasters: Vec<RgbImage>,
    pub nav_annotations: Option<Vec<FloatMap>>,
    pub tumor_mask: Option<BinaryMask>,
    pub label: Option<SlideLabel>,
}

impl MagnificationPyramid {
    /// Builds a pyramid and checks every structural invariant.
    pub fn new(
        slide_id: impl Into<String>,
        levels: Vec<MagnificationLevel>,
        rasters: Vec<RgbImage>,
        nav_annotations: Option<Vec<FloatMap>>,
        tumor_mask: Option<BinaryMask>,
        label: Option<SlideLabel>,
    ) -> Result<Self> {
        let p = Self {
            slide_id: slide_id.into(),
            levels,
            rasters,
            nav_annotations,
            tumor_mask,
            label,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(PyramidError::Invalid("pyramid has no levels".into()));
        }
        if self.rasters.len() != self.levels.len() {
            return Err(PyramidError::Invalid(format!(
                "{} levels but {} rasters",
                self.levels.len(),
                self.rasters.len()
            )));
        }
        for (i, lvl) in self.levels.iter().enumerate() {
            if lvl.index != i {
                return Err(PyramidError::Invalid(format!(
                    "level at position {i} has index {}",
                    lvl.index
                )));
            }
            if !(lvl.magnification > 0.0) || lvl.width == 0 || lvl.height == 0 {
                return Err(PyramidError::Invalid(format!("level {i} has a non-positive size or magnification")));
            }
            if i > 0 {
                let prev = &self.levels[i - 1];
                if lvl.magnification <= prev.magnification {
                    return Err(PyramidError::Invalid(format!(
                        "magnification must increase with index (level {i})"
                    )));
                }
                let ratio = lvl.magnification / prev.magnification;
                for (what, lo, hi) in [("width", prev.width, lvl.width), ("height", prev.height, lvl.height)] {
                    let expect = lo as f64 * ratio;
                    if (expect - hi as f64).abs() > 1.0 + 1e-9 {
                        return Err(PyramidError::Invalid(format!(
                            "level {i} {what} {hi} inconsistent with level {} {what} {lo} at ratio {ratio}",
                            i - 1
                        )));
                    }
                }
            }
            let r = &self.rasters[i];
            if (r.width(), r.height()) != (lvl.width, lvl.height) {
                return Err(PyramidError::DimensionMismatch {
                    what: format!("raster of level {i}"),
                    expected: (lvl.width, lvl.height),
                    actual: (r.width(), r.height()),
                });
            }
        }
        if let Some(nav) = &self.nav_annotations {
            if nav.len() != self.levels.len() {
                return Err(PyramidError::Invalid(format!(
                    "navigation annotations for {} of {} levels",
                    nav.len(),
                    self.levels.len()
                )));
            }
            for (i, (g, lvl)) in nav.iter().zip(&self.levels).enumerate() {
                if (g.width as u32, g.height as u32) != (lvl.width, lvl.height) {
                    return Err(PyramidError::DimensionMismatch {
                        what: format!("navigation annotation of level {i}"),
                        expected: (lvl.width, lvl.height),
                        actual: (g.width as u32, g.height as u32),
                    });
                }
                if let Some(v) = g.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(PyramidError::ValueOutOfRange {
                        what: format!("navigation annotation of level {i}"),
                        detail: format!("value {v} outside [0, 1]"),
                    });
                }
            }
        }
        if let Some(mask) = &self.tumor_mask {
            let top = self.top_level();
            if (mask.width as u32, mask.height as u32) != (top.width, top.height) {
                return Err(PyramidError::DimensionMismatch {
                    what: "tumor mask".into(),
                    expected: (top.width, top.height),
                    actual: (mask.width as u32, mask.height as u32),
                });
            }
            if let Some(v) = mask.data.iter().find(|&&v| v > 1) {
                return Err(PyramidError::ValueOutOfRange {
                    what: "tumor mask".into(),
                    detail: format!("value {v} outside {{0, 1}}"),
                });
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn top_index(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn top_level(&self) -> &MagnificationLevel {
        self.levels.last().expect("validated non-empty")
    }

    pub fn level(&self, m: usize) -> Result<&MagnificationLevel> {
        self.levels.get(m).ok_or(PyramidError::LevelNotFound(m))
    }

    pub fn raster(&self, m: usize) -> Result<&RgbImage> {
        self.rasters.get(m).ok_or(PyramidError::LevelNotFound(m))
    }

    pub fn nav(&self, m: usize) -> Option<&FloatMap> {
        self.nav_annotations.as_ref().and_then(|n| n.get(m))
    }

    /// Tumor mask rendered to an arbitrary grid by block-max.
    pub fn tumor_mask_on(&self, width: usize, height: usize) -> Option<BinaryMask> {
        self.tumor_mask.as_ref().map(|m| m.block_max(width, height))
    }

    /// Tumor mask in a given level's pixel frame.
    pub fn tumor_mask_at_level(&self, m: usize) -> Result<Option<BinaryMask>> {
        let lvl = self.level(m)?;
        Ok(self.tumor_mask_on(lvl.width as usize, lvl.height as usize))
    }
}
