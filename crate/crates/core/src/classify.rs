//! Attention-based multiple-instance classifier over region features.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::TokenGrid;
use crate::mcfn::Ablation;
use crate::optim::{Adam, AdamConfig};
use crate::pyramid::{MagnificationPyramid, Region, SlideLabel};

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("bag `{0}` has no instances")]
    EmptyBag(String),
    #[error("bag `{0}`: {1}")]
    BadBag(String, String),
    #[error("training set contains a single class")]
    SingleClass,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ClassifyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub slide_id: String,
    pub label: SlideLabel,
    pub instances: Vec<Vec<f64>>,
    /// Heatmap score of each instance, used for top-k budgets.
    pub scores: Vec<f64>,
}

impl Bag {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.instances.is_empty() {
            return Err(ClassifyError::EmptyBag(self.slide_id.clone()));
        }
        if self.scores.len() != self.instances.len() {
            return Err(ClassifyError::BadBag(self.slide_id.clone(), "one score per instance is required".into()));
        }
        for h in &self.instances {
            if h.len() != dim {
                return Err(ClassifyError::BadBag(
                    self.slide_id.clone(),
                    format!("instance dim {} but classifier dim {dim}", h.len()),
                ));
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(ClassifyError::BadBag(self.slide_id.clone(), "non-finite feature".into()));
            }
        }
        Ok(())
    }

    /// Keeps the instances at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Bag {
        Bag {
            slide_id: self.slide_id.clone(),
            label: self.label,
            instances: idx.iter().map(|&i| self.instances[i].clone()).collect(),
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Mean of the tokens whose grid cells overlap `region` (in its level's
/// pixel frame; the grid spans the whole level).
pub fn region_feature(tokens: &TokenGrid, region: &Region, level_w: u32, level_h: u32) -> Vec<f64> {
    let (gw, gh) = (tokens.grid_w as u64, tokens.grid_h as u64);
    let cell_range = |lo: u32, len: u32, extent: u32, g: u64| {
        let a = (lo as u64 * g) / extent as u64;
        let b = ((lo as u64 + len as u64) * g).div_ceil(extent as u64).clamp(a + 1, g);
        (a as usize, b as usize)
    };
    let (c0, c1) = cell_range(region.x, region.w, level_w, gw);
    let (r0, r1) = cell_range(region.y, region.h, level_h, gh);
    let mut out = vec![0.0; tokens.dim];
    for r in r0..r1 {
        for c in c0..c1 {
            for (o, t) in out.iter_mut().zip(tokens.token(r, c)) {
                *o += t;
            }
        }
    }
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// One instance per region, features pooled from that region's level tokens.
pub fn bag_from_regions(
    pyramid: &MagnificationPyramid,
    tokens: &[TokenGrid],
    regions: &[Region],
    label: SlideLabel,
) -> Result<Bag> {
    let mut instances = Vec::with_capacity(regions.len());
    for r in regions {
        let lvl = pyramid
            .levels
            .get(r.level_index)
            .ok_or_else(|| ClassifyError::BadBag(pyramid.slide_id.clone(), format!("no level {}", r.level_index)))?;
        let grid = tokens
            .get(r.level_index)
            .ok_or_else(|| ClassifyError::BadBag(pyramid.slide_id.clone(), format!("no tokens for level {}", r.level_index)))?;
        instances.push(region_feature(grid, r, lvl.width, lvl.height));
    }
    let bag = Bag {
        slide_id: pyramid.slide_id.clone(),
        label,
        instances,
        scores: regions.iter().map(|r| r.score).collect(),
    };
    if bag.instances.is_empty() {
        return Err(ClassifyError::EmptyBag(bag.slide_id));
    }
    Ok(bag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbmilParams {
    pub dim: usize,
    pub hidden: usize,
    /// `hidden × dim`, row-major.
    pub v: Vec<f64>,
    pub wa: Vec<f64>,
    /// `classes × dim`, row-major.
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
}

impl AbmilParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            hidden,
            v: vec![0.0; hidden * dim],
            wa: vec![0.0; hidden],
            wc: vec![0.0; NUM_CLASSES * dim],
            bc: vec![0.0; NUM_CLASSES],
        }
    }

    /// Glorot-style normal initialization.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dim, hidden);
        let mut fill = |buf: &mut [f64], fan_in: usize, fan_out: usize| {
            let n = Normal::new(0.0, (2.0 / (fan_in + fan_out) as f64).sqrt()).unwrap();
            buf.iter_mut().for_each(|x| *x = n.sample(&mut rng));
        };
        fill(&mut p.v, dim, hidden);
        fill(&mut p.wa, hidden, 1);
        fill(&mut p.wc, dim, NUM_CLASSES);
        p
    }

    pub fn groups(&self) -> Vec<(&'static str, &[f64])> {
        vec![("v", &self.v[..]), ("wa", &self.wa[..]), ("wc", &self.wc[..]), ("bc", &self.bc[..])]
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("v", &mut self.v[..]),
            ("wa", &mut self.wa[..]),
            ("wc", &mut self.wc[..]),
            ("bc", &mut self.bc[..]),
        ]
    }

    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("v", vec![self.hidden, self.dim]),
            ("wa", vec![self.hidden]),
            ("wc", vec![NUM_CLASSES, self.dim]),
            ("bc", vec![NUM_CLASSES]),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbmilOutput {
    pub probs: [f64; NUM_CLASSES],
    /// Attention per instance, in the bag's order.
    pub attention: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Instance order used for every accumulation, so results do not depend
/// on how the bag was shuffled.
fn canonical_order(bag: &Bag) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..bag.instances.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (&bag.instances[a], &bag.instances[b]);
        x.iter()
            .zip(y)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

struct Cache {
    order: Vec<usize>,
    t: Vec<Vec<f64>>,
    a: Vec<f64>,
    z: Vec<f64>,
    probs: [f64; NUM_CLASSES],
}

fn forward_cached(bag: &Bag, p: &AbmilParams) -> Result<Cache> {
    if bag.instances.is_empty() {
        return Err(ClassifyError::EmptyBag(bag.slide_id.clone()));
    }
    let d = p.dim;
    let order = canonical_order(bag);
    let mut t = Vec::with_capacity(order.len());
    let mut e = Vec::with_capacity(order.len());
    for &i in &order {
        let h = &bag.instances[i];
        let ti: Vec<f64> = (0..p.hidden)
            .map(|r| p.v[r * d..(r + 1) * d].iter().zip(h).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect();
        e.push(ti.iter().zip(&p.wa).map(|(a, b)| a * b).sum::<f64>());
        t.push(ti);
    }
    let a = softmax(&e);
    let mut z = vec![0.0; d];
    for (k, &i) in order.iter().enumerate() {
        for (zj, hj) in z.iter_mut().zip(&bag.instances[i]) {
            *zj += a[k] * hj;
        }
    }
    let logits: Vec<f64> = (0..NUM_CLASSES)
        .map(|c| p.bc[c] + p.wc[c * d..(c + 1) * d].iter().zip(&z).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    let s = softmax(&logits);
    let probs = [s[0], s[1], s[2], s[3]];
    Ok(Cache { order, t, a, z, probs })
}

/// Class probabilities of a bag.
pub fn abmil_forward(bag: &Bag, params: &AbmilParams) -> Result<AbmilOutput> {
    let c = forward_cached(bag, params)?;
    let mut attention = vec![0.0; c.order.len()];
    for (k, &i) in c.order.iter().enumerate() {
        attention[i] = c.a[k];
    }
    Ok(AbmilOutput {
        probs: c.probs,
        attention,
        pooled: c.z,
    })
}

/// Cross-entropy of the bag label and its gradient.
pub fn abmil_loss_grad(bag: &Bag, p: &AbmilParams) -> Result<(f64, AbmilParams)> {
    let c = forward_cached(bag, p)?;
    let d = p.dim;
    let y = bag.label.index();
    let loss = -c.probs[y].max(1e-300).ln();
    let mut g = AbmilParams::zeros(d, p.hidden);
    let ds: Vec<f64> = (0..NUM_CLASSES).map(|k| c.probs[k] - if k == y { 1.0 } else { 0.0 }).collect();
    let mut dz = vec![0.0; d];
    for k in 0..NUM_CLASSES {
        g.bc[k] = ds[k];
        for j in 0..d {
            g.wc[k * d + j] = ds[k] * c.z[j];
            dz[j] += p.wc[k * d + j] * ds[k];
        }
    }
    let da: Vec<f64> = c
        .order
        .iter()
        .map(|&i| bag.instances[i].iter().zip(&dz).map(|(h, g)| h * g).sum::<f64>())
        .collect();
    let mean: f64 = c.a.iter().zip(&da).map(|(a, g)| a * g).sum();
    for (k, &i) in c.order.iter().enumerate() {
        let de = c.a[k] * (da[k] - mean);
        let h = &bag.instances[i];
        for r in 0..p.hidden {
            let tr = c.t[k][r];
            g.wa[r] += de * tr;
            let dpre = de * p.wa[r] * (1.0 - tr * tr);
            for j in 0..d {
                g.v[r * d + j] += dpre * h[j];
            }
        }
    }
    Ok((loss, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            adam: AdamConfig {
                lr: 5e-3,
                ..Default::default()
            },
            epochs: 40,
            seed: 0,
            folds: 5,
        }
    }
}

/// Per-bag Adam steps over seed-shuffled epochs.
pub fn train_classifier(bags: &[Bag], mut params: AbmilParams, cfg: &ClassifierConfig) -> Result<AbmilParams> {
    cfg.adam.validate().map_err(ClassifyError::Config)?;
    for b in bags {
        b.validate(params.dim)?;
    }
    let first = bags.first().map(|b| b.label);
    if bags.iter().all(|b| Some(b.label) == first) {
        return Err(ClassifyError::SingleClass);
    }
    let sizes: Vec<usize> = params.groups().iter().map(|(_, g)| g.len()).collect();
    let mut opt = Adam::new(cfg.adam.clone(), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (_, g) = abmil_loss_grad(&bags[i], &params)?;
            let grads: Vec<&[f64]> = g.groups().into_iter().map(|(_, v)| v).collect();
            let prefs: Vec<&mut [f64]> = params.groups_mut().into_iter().map(|(_, v)| v).collect();
            opt.step(prefs, grads, &[true; 4]);
        }
    }
    Ok(params)
}

/// One-vs-rest AUC by pairwise comparison (ties count half).
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let npos = positive.iter().filter(|&&p| p).count();
    let nneg = positive.len() - npos;
    if npos == 0 || nneg == 0 {
        return None;
    }
    // rank-sum with average ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += r * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (npos * (npos + 1)) as f64 / 2.0;
    Some(u / (npos * nneg) as f64)
}

/// Mean one-vs-rest AUC over classes with both positives and negatives.
pub fn macro_auc(probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Option<f64> {
    let aucs: Vec<f64> = (0..NUM_CLASSES)
        .filter_map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            binary_auc(&s, &pos)
        })
        .collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

pub fn argmax(p: &[f64; NUM_CLASSES]) -> usize {
    (0..NUM_CLASSES).fold(0, |b, k| if p[k] > p[b] { k } else { b })
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let recalls: Vec<f64> = (0..NUM_CLASSES)
        .filter_map(|c| {
            let n = labels.iter().filter(|&&l| l == c).count();
            (n > 0).then(|| {
                pred.iter().zip(labels).filter(|(&p, &l)| l == c && p == c).count() as f64 / n as f64
            })
        })
        .collect();
    recalls.iter().sum::<f64>() / recalls.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub auc: f64,
    pub bacc: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub bacc_mean: f64,
    pub bacc_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Stratified fold assignment: each class is shuffled then dealt round robin.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % k;
            next += 1;
        }
    }
    fold
}

/// Trains on every fold complement and scores the held-out fold. Folds run
/// in parallel; each fold's training is sequential and seeded.
pub fn cross_validate(bags: &[Bag], dim: usize, cfg: &ClassifierConfig) -> Result<CvReport> {
    if cfg.folds < 2 || bags.len() < cfg.folds {
        return Err(ClassifyError::Config(format!(
            "{} folds need at least that many bags (got {})",
            cfg.folds,
            bags.len()
        )));
    }
    let labels: Vec<usize> = bags.iter().map(|b| b.label.index()).collect();
    let assign = stratified_folds(&labels, cfg.folds, cfg.seed);
    let folds: Vec<FoldResult> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<Bag> = bags.iter().zip(&assign).filter(|(_, &a)| a != f).map(|(b, _)| b.clone()).collect();
            let test: Vec<&Bag> = bags.iter().zip(&assign).filter(|(_, &a)| a == f).map(|(b, _)| b).collect();
            let init = AbmilParams::init(dim, cfg.hidden, cfg.seed.wrapping_add(f as u64));
            let params = train_classifier(&train, init, cfg)?;
            let probs: Vec<[f64; NUM_CLASSES]> = test
                .iter()
                .map(|b| abmil_forward(b, &params).map(|o| o.probs))
                .collect::<Result<_>>()?;
            let y: Vec<usize> = test.iter().map(|b| b.label.index()).collect();
            let pred: Vec<usize> = probs.iter().map(argmax).collect();
            let acc = pred.iter().zip(&y).filter(|(p, l)| p == l).count() as f64 / y.len() as f64;
            Ok(FoldResult {
                fold: f,
                auc: macro_auc(&probs, &y).unwrap_or(f64::NAN),
                bacc: balanced_accuracy(&pred, &y),
                accuracy: acc,
            })
        })
        .collect::<Result<_>>()?;
    let (auc_mean, auc_std) = mean_std(&folds.iter().map(|f| f.auc).collect::<Vec<_>>());
    let (bacc_mean, bacc_std) = mean_std(&folds.iter().map(|f| f.bacc).collect::<Vec<_>>());
    Ok(CvReport {
        folds,
        auc_mean,
        auc_std,
        bacc_mean,
        bacc_std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Random,
    Topk,
}

impl Sampling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sampling::Random => "random",
            Sampling::Topk => "topk",
        }
    }
}

/// Instances kept for a budget: top-k by score (ties by index) or a seeded
/// uniform sample; the kept set is returned in ascending index order.
pub fn budget_indices(bag: &Bag, budget: f64, mode: Sampling, seed: u64) -> Vec<usize> {
    let n = bag.instances.len();
    let k = ((budget * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    match mode {
        Sampling::Topk => idx.sort_by(|&a, &b| bag.scores[b].total_cmp(&bag.scores[a]).then(a.cmp(&b))),
        Sampling::Random => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub sampling: Sampling,
    pub mab: bool,
    pub cmb_l: bool,
    pub cmb_h: bool,
    pub budget: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

fn slide_seed(seed: u64, slide: &str) -> u64 {
    slide.bytes().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Cross-validated AUC for every (mode, budget) pair. `ablation` records
/// which fusion components produced the instance scores.
pub fn evaluate_budgets(
    bags: &[Bag],
    dim: usize,
    budgets: &[f64],
    modes: &[Sampling],
    ablation: Ablation,
    cfg: &ClassifierConfig,
) -> Result<Vec<BudgetRow>> {
    if let Some(b) = budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
        return Err(ClassifyError::Config(format!("budget {b} is outside (0, 1]")));
    }
    let mut rows = Vec::with_capacity(budgets.len() * modes.len());
    for &mode in modes {
        for &budget in budgets {
            let sub: Vec<Bag> = bags
                .iter()
                .map(|b| b.subset(&budget_indices(b, budget, mode, slide_seed(cfg.seed, &b.slide_id))))
                .collect();
            let (auc_mean, auc_std) = if let Some(empty) = sub.iter().find(|b| b.instances.is_empty()) {
                log::warn!("budget {budget} leaves slide `{}` without patches; row skipped", empty.slide_id);
                (f64::NAN, f64::NAN)
            } else {
                let rep = cross_validate(&sub, dim, cfg)?;
                (rep.auc_mean, rep.auc_std)
            };
            rows.push(BudgetRow {
                sampling: mode,
                mab: ablation.mab,
                cmb_l: ablation.cmb_low,
                cmb_h: ablation.cmb_high,
                budget,
                auc_mean,
                auc_std,
            });
        }
    }
    Ok(rows)
}

pub const BUDGET_HEADER: &str = "sampling,mab,cmb_l,cmb_h,budget,auc_mean,auc_std";

pub fn write_budget_table<W: Write>(mut out: W, rows: &[BudgetRow]) -> Result<()> {
    writeln!(out, "{BUDGET_HEADER}")?;
    let flag = |b: bool| if b { 1 } else { 0 };
    let num = |v: f64| if v.is_nan() { "nan".to_string() } else { format!("{v:.6}") };
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.sampling.as_str(),
            flag(r.mab),
            flag(r.cmb_l),
            flag(r.cmb_h),
            r.budget,
            num(r.auc_mean),
            num(r.auc_std)
        )?;
    }
    Ok(())
}

/// Bags whose instances are class-specific mean shifts plus Gaussian noise.
pub fn synthetic_bags(n_per_class: usize, instances: usize, dim: usize, shift: f64, seed: u64) -> Vec<Bag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut bags = Vec::new();
    for i in 0..n_per_class {
        for label in SlideLabel::ALL {
            let c = label.index();
            let feats: Vec<Vec<f64>> = (0..instances)
                .map(|_| {
                    (0..dim)
                        .map(|j| noise.sample(&mut rng) + if j % NUM_CLASSES == c { shift } else { 0.0 })
                        .collect()
                })
                .collect();
            bags.push(Bag {
                slide_id: format!("bag-{c}-{i}"),
                label,
                scores: (0..instances).map(|_| rng.random::<f64>()).collect(),
                instances: feats,
            });
        }
    }
    bags
}
