//! Level rendering and frozen patch tokenization.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pyramid::{resample_area, MagnificationPyramid, PyramidError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error("invalid encoder spec: {0}")]
    Spec(String),
    #[error("encoder backend error: {0}")]
    Backend(String),
    #[error("no encoder factory registered under `{0}`")]
    UnknownFactory(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderKind {
    Toy,
    External { factory: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub patch_size: usize,
    pub token_dim: usize,
    /// Side of the square rendering fed to the encoder.
    pub input_size: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub kind: EncoderKind,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            patch_size: 16,
            token_dim: 32,
            input_size: 256,
            seed: 0x5eed,
            kind: EncoderKind::Toy,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(EncoderError::Spec(format!(
                "input size {} is not a multiple of patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.token_dim == 0 {
            return Err(EncoderError::Spec("token_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Stable content hash, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Real-valued RGB image in [0, 1], interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl LevelImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Flattened `(py, px, channel)` patch with top-left corner at patch-grid `(row, col)`.
    pub fn patch(&self, row: usize, col: usize, size: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(size * size * 3);
        for py in 0..size {
            let y = row * size + py;
            let start = (y * self.width + col * size) * 3;
            out.extend_from_slice(&self.data[start..start + size * 3]);
        }
        out
    }
}

/// Area-averaged rendering of level `m` at `size`×`size`.
pub fn render_level(p: &MagnificationPyramid, m: usize, size: usize) -> Result<LevelImage> {
    let raster = p.raster(m)?;
    let (w, h) = (raster.width() as usize, raster.height() as usize);
    let src: Vec<f64> = raster.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let data = resample_area(&src, w, h, 3, size, size);
    Ok(LevelImage {
        width: size,
        height: size,
        data,
    })
}

/// Patch tokens on a regular grid, `(grid_h, grid_w, dim)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub level_index: usize,
    /// Cell extent in the level's pixel frame (x, y).
    pub cell_size: (f64, f64),
}

impl TokenGrid {
    pub fn zeros(grid_h: usize, grid_w: usize, dim: usize, level_index: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            dim,
            data: vec![0.0; grid_h * grid_w * dim],
            level_index,
            cell_size: (1.0, 1.0),
        }
    }

    pub fn from_tokens(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), grid_h * grid_w * dim);
        Self {
            grid_h,
            grid_w,
            dim,
            data,
            level_index: 0,
            cell_size: (1.0, 1.0),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.grid_w + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn token_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.grid_w + col) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Frozen patch encoder: maps flattened patches to `dim`-vectors.
pub trait PatchEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_patches(&self, patches: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Seeded random linear projection followed by per-token standardization.
pub struct ToyEncoder {
    dim: usize,
    input_len: usize,
    projection: Vec<f64>,
}

impl fmt::Debug for ToyEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToyEncoder")
            .field("dim", &self.dim)
            .field("input_len", &self.input_len)
            .finish()
    }
}

impl ToyEncoder {
    pub fn new(spec: &EncoderSpec) -> Self {
        let input_len = 3 * spec.patch_size * spec.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, 1.0 / (input_len as f64).sqrt()).expect("valid normal");
        let projection = (0..spec.token_dim * input_len).map(|_| normal.sample(&mut rng)).collect();
        Self {
            dim: spec.token_dim,
            input_len,
            projection,
        }
    }

    fn project(&self, patch: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .projection
            .chunks_exact(self.input_len)
            .map(|row| row.iter().zip(patch).map(|(a, b)| a * b).sum())
            .collect();
        let n = out.len() as f64;
        let mean = out.iter().sum::<f64>() / n;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var > 1e-18 {
            let inv = 1.0 / var.sqrt();
            for v in &mut out {
                *v = (*v - mean) * inv;
            }
        } else {
            for v in &mut out {
                *v -= mean;
            }
        }
        out
    }
}

impl PatchEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_patches(&self, patches: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        patches
            .iter()
            .map(|p| {
                if p.len() != self.input_len {
                    return Err(EncoderError::Backend(format!(
                        "patch of length {} where {} expected",
                        p.len(),
                        self.input_len
                    )));
                }
                Ok(self.project(p))
            })
            .collect()
    }
}

type Factory = Box<dyn Fn(&EncoderSpec) -> Result<Arc<dyn PatchEncoder>> + Send + Sync>;

/// Named constructors for external encoders.
#[derive(Default)]
pub struct EncoderRegistry {
    factories: BTreeMap<String, Factory>,
}

impl EncoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: impl Into<String>, factory: F)
    where
        F: Fn(&EncoderSpec) -> Result<Arc<dyn PatchEncoder>> + Send + Sync + 'static,
    {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn build(&self, spec: &EncoderSpec) -> Result<Arc<dyn PatchEncoder>> {
        spec.validate()?;
        match &spec.kind {
            EncoderKind::Toy => Ok(Arc::new(ToyEncoder::new(spec))),
            EncoderKind::External { factory } => {
                let f = self
                    .factories
                    .get(factory)
                    .ok_or_else(|| EncoderError::UnknownFactory(factory.clone()))?;
                f(spec)
            }
        }
    }
}

/// Tokenizes an image with an already-built encoder.
pub fn encode_with(img: &LevelImage, spec: &EncoderSpec, encoder: &dyn PatchEncoder) -> Result<TokenGrid> {
    spec.validate()?;
    if img.width != spec.input_size || img.height != spec.input_size {
        return Err(EncoderError::Spec(format!(
            "image is {}x{}, encoder expects {}x{}",
            img.width, img.height, spec.input_size, spec.input_size
        )));
    }
    let side = spec.grid_side();
    let patches: Vec<Vec<f64>> = (0..side * side)
        .map(|i| img.patch(i / side, i % side, spec.patch_size))
        .collect();
    let tokens = encoder.encode_patches(&patches)?;
    if tokens.len() != patches.len() {
        return Err(EncoderError::Backend(format!(
            "encoder returned {} tokens for {} patches",
            tokens.len(),
            patches.len()
        )));
    }
    let dim = spec.token_dim;
    let mut data = Vec::with_capacity(side * side * dim);
    for t in &tokens {
        if t.len() != dim || t.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::Backend(format!(
                "encoder returned a token of length {} (expected {dim}) or with non-finite values",
                t.len()
            )));
        }
        data.extend_from_slice(t);
    }
    Ok(TokenGrid {
        grid_h: side,
        grid_w: side,
        dim,
        data,
        level_index: 0,
        cell_size: (spec.patch_size as f64, spec.patch_size as f64),
    })
}

/// Tokenizes with the built-in toy encoder.
pub fn encode(img: &LevelImage, spec: &EncoderSpec) -> Result<TokenGrid> {
    match spec.kind {
        EncoderKind::Toy => encode_with(img, spec, &ToyEncoder::new(spec)),
        EncoderKind::External { ref factory } => Err(EncoderError::UnknownFactory(factory.clone())),
    }
}

/// Renders and tokenizes one level.
pub fn encode_level(
    p: &MagnificationPyramid,
    m: usize,
    spec: &EncoderSpec,
    encoder: &dyn PatchEncoder,
) -> Result<TokenGrid> {
    let img = render_level(p, m, spec.input_size)?;
    let mut grid = encode_with(&img, spec, encoder)?;
    let lvl = p.level(m)?;
    grid.level_index = m;
    grid.cell_size = (
        lvl.width as f64 / grid.grid_w as f64,
        lvl.height as f64 / grid.grid_h as f64,
    );
    Ok(grid)
}

/// Tokens for every level of a slide, lowest magnification first.
pub fn encode_pyramid(p: &MagnificationPyramid, spec: &EncoderSpec, encoder: &dyn PatchEncoder) -> Result<Vec<TokenGrid>> {
    (0..p.num_levels())
        .into_par_iter()
        .map(|m| encode_level(p, m, spec, encoder))
        .collect()
}
