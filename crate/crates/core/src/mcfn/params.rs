use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::ProjectionSet;
use super::decoder::DecoderParams;

/// Which fusion components are active. Inactive gates are held at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub mab: bool,
    pub cmb_low: bool,
    pub cmb_high: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self {
            mab: true,
            cmb_low: true,
            cmb_high: true,
        }
    }

    pub fn none() -> Self {
        Self {
            mab: false,
            cmb_low: false,
            cmb_high: false,
        }
    }

    pub fn without_cmb() -> Self {
        Self {
            mab: true,
            cmb_low: false,
            cmb_high: false,
        }
    }
}

/// How neighbor attention in the cross-magnification block is scoped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmbScope {
    /// Attention inside aligned `side`×`side` token windows.
    Windowed { side: usize },
    /// One attention over the whole neighbor grid.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McfnConfig {
    pub dim: usize,
    pub levels: usize,
    pub heads: usize,
    pub cmb_scope: CmbScope,
    pub ablation: Ablation,
    /// Side of the output heatmap.
    pub output_size: usize,
    pub gate_init: f64,
    pub seed: u64,
}

impl Default for McfnConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            levels: 5,
            heads: 1,
            cmb_scope: CmbScope::Windowed { side: 4 },
            ablation: Ablation::full(),
            output_size: 256,
            gate_init: 0.1,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McfnParams {
    pub config: McfnConfig,
    /// One magnification token per level, `(levels, dim)`.
    pub mag_tokens: Vec<f64>,
    pub mab: ProjectionSet,
    pub cmb: ProjectionSet,
    pub gamma: f64,
    pub u: f64,
    pub w: f64,
    pub decoder: DecoderParams,
}


fn orthogonal(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut m: Vec<f64> = (0..dim * dim).map(|_| normal.sample(rng)).collect();
    // Gram-Schmidt over rows.
    for r in 0..dim {
        for p in 0..r {
            let dot: f64 = (0..dim).map(|c| m[r * dim + c] * m[p * dim + c]).sum();
            for c in 0..dim {
                m[r * dim + c] -= dot * m[p * dim + c];
            }
        }
        let norm = (0..dim).map(|c| m[r * dim + c].powi(2)).sum::<f64>().sqrt();
        for c in 0..dim {
            m[r * dim + c] /= norm;
        }
    }
    m
}

impl McfnParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: McfnConfig) -> Self {
        let d = config.dim;
        Self {
            mag_tokens: vec![0.0; config.levels * d],
            mab: ProjectionSet::zeros(d),
            cmb: ProjectionSet::zeros(d),
            gamma: 0.0,
            u: 0.0,
            w: 0.0,
            decoder: DecoderParams::zeros(d),
            config,
        }
    }

    /// Seeded initialization: `t^m ~ N(0, 1/D)`, orthogonal projections,
    /// Kaiming-normal convolutions, gates at `gate_init` unless ablated.
    pub fn init(config: McfnConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let mut p = Self::zeros(config);
        let tok = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid normal");
        p.mag_tokens.iter_mut().for_each(|v| *v = tok.sample(&mut rng));
        for set in [&mut p.mab, &mut p.cmb] {
            set.wq = orthogonal(d, &mut rng);
            set.wk = orthogonal(d, &mut rng);
            set.wv = orthogonal(d, &mut rng);
            set.wo = orthogonal(d, &mut rng);
        }
        for conv in [&mut p.decoder.conv1, &mut p.decoder.conv2, &mut p.decoder.conv3] {
            let std = (2.0 / (conv.in_ch * 9) as f64).sqrt();
            let n = Normal::new(0.0, std).expect("valid normal");
            conv.weight.iter_mut().for_each(|v| *v = n.sample(&mut rng));
        }
        let g = p.config.gate_init;
        let ab = p.config.ablation;
        p.gamma = if ab.mab { g } else { 0.0 };
        p.u = if ab.cmb_low { g } else { 0.0 };
        p.w = if ab.cmb_high { g } else { 0.0 };
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone())
    }

    pub fn mag_token(&self, m: usize) -> Option<&[f64]> {
        let d = self.config.dim;
        self.mag_tokens.get(m * d..(m + 1) * d)
    }

    /// Named tensors in declaration order (the checkpoint order).
    pub fn groups(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("mag_tokens", &self.mag_tokens[..]),
            ("mab.wq", &self.mab.wq[..]),
            ("mab.wk", &self.mab.wk[..]),
            ("mab.wv", &self.mab.wv[..]),
            ("mab.wo", &self.mab.wo[..]),
            ("cmb.wq", &self.cmb.wq[..]),
            ("cmb.wk", &self.cmb.wk[..]),
            ("cmb.wv", &self.cmb.wv[..]),
            ("cmb.wo", &self.cmb.wo[..]),
            ("gamma", std::slice::from_ref(&self.gamma)),
            ("u", std::slice::from_ref(&self.u)),
            ("w", std::slice::from_ref(&self.w)),
            ("decoder.conv1.weight", &self.decoder.conv1.weight[..]),
            ("decoder.conv1.bias", &self.decoder.conv1.bias[..]),
            ("decoder.conv2.weight", &self.decoder.conv2.weight[..]),
            ("decoder.conv2.bias", &self.decoder.conv2.bias[..]),
            ("decoder.conv3.weight", &self.decoder.conv3.weight[..]),
            ("decoder.conv3.bias", &self.decoder.conv3.bias[..]),
        ]
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("mag_tokens", &mut self.mag_tokens[..]),
            ("mab.wq", &mut self.mab.wq[..]),
            ("mab.wk", &mut self.mab.wk[..]),
            ("mab.wv", &mut self.mab.wv[..]),
            ("mab.wo", &mut self.mab.wo[..]),
            ("cmb.wq", &mut self.cmb.wq[..]),
            ("cmb.wk", &mut self.cmb.wk[..]),
            ("cmb.wv", &mut self.cmb.wv[..]),
            ("cmb.wo", &mut self.cmb.wo[..]),
            ("gamma", std::slice::from_mut(&mut self.gamma)),
            ("u", std::slice::from_mut(&mut self.u)),
            ("w", std::slice::from_mut(&mut self.w)),
            ("decoder.conv1.weight", &mut self.decoder.conv1.weight[..]),
            ("decoder.conv1.bias", &mut self.decoder.conv1.bias[..]),
            ("decoder.conv2.weight", &mut self.decoder.conv2.weight[..]),
            ("decoder.conv2.bias", &mut self.decoder.conv2.bias[..]),
            ("decoder.conv3.weight", &mut self.decoder.conv3.weight[..]),
            ("decoder.conv3.bias", &mut self.decoder.conv3.bias[..]),
        ]
    }

    /// Shapes matching [`Self::groups`].
    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.config.dim;
        let (c1, c2) = DecoderParams::channels(d);
        vec![
            ("mag_tokens", vec![self.config.levels, d]),
            ("mab.wq", vec![d, d]),
            ("mab.wk", vec![d, d]),
            ("mab.wv", vec![d, d]),
            ("mab.wo", vec![d, d]),
            ("cmb.wq", vec![d, d]),
            ("cmb.wk", vec![d, d]),
            ("cmb.wv", vec![d, d]),
            ("cmb.wo", vec![d, d]),
            ("gamma", vec![1]),
            ("u", vec![1]),
            ("w", vec![1]),
            ("decoder.conv1.weight", vec![c1, d, 3, 3]),
            ("decoder.conv1.bias", vec![c1]),
            ("decoder.conv2.weight", vec![c2, c1, 3, 3]),
            ("decoder.conv2.bias", vec![c2]),
            ("decoder.conv3.weight", vec![1, c2, 3, 3]),
            ("decoder.conv3.bias", vec![1]),
        ]
    }

    /// Whether a group receives optimizer updates under the current ablation.
    pub fn is_trainable(&self, group: &str) -> bool {
        let ab = self.config.ablation;
        match group {
            "gamma" => ab.mab,
            "u" => ab.cmb_low,
            "w" => ab.cmb_high,
            _ => true,
        }
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    /// Flat-index accessors spanning every group in declaration order.
    pub fn get_flat(&self, mut i: usize) -> f64 {
        for (_, g) in self.groups() {
            if i < g.len() {
                return g[i];
            }
            i -= g.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for (_, g) in self.groups_mut() {
            if i < g.len() {
                g[i] = v;
                return;
            }
            i -= g.len();
        }
        panic!("flat parameter index out of range")
    }

    /// Group name and offset within the group for a flat index.
    pub fn locate_flat(&self, mut i: usize) -> (&'static str, usize) {
        for (name, g) in self.groups() {
            if i < g.len() {
                return (name, i);
            }
            i -= g.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn add_assign(&mut self, other: &McfnParams) {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, a) in self.groups_mut() {
            a.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}
