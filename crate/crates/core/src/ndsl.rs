//! Navigation-driven supervision loss and the training loop for the
//! fusion network.
//!
//! The loss is `λ_l·L1_w + λ_dice·Dice + λ_sig·Focal` on continuous targets.
//! All terms take flat, equally sized prediction and target buffers.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode_pyramid, EncoderError, EncoderSpec, PatchEncoder, TokenGrid};
use crate::mcfn::{backward_level, forward_level, McfnError, McfnParams};
use crate::optim::{Adam, AdamConfig};
use crate::pyramid::MagnificationPyramid;

#[derive(Debug, Error)]
pub enum NdslError {
    #[error("prediction has {pred} values but target has {target}")]
    Shape { pred: usize, target: usize },
    #[error("invalid loss or optimizer setting: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Mcfn(#[from] McfnError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NdslError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_l: f64,
    pub lambda_dice: f64,
    pub lambda_sig: f64,
    /// Weight of pixels whose target exceeds `fg_threshold`.
    pub fg_weight: f64,
    pub fg_threshold: f64,
    pub eps: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l: 0.1,
            lambda_dice: 1.0,
            lambda_sig: 1.0,
            fg_weight: 2.0,
            fg_threshold: 0.0,
            eps: 1e-6,
            focal_gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_l, self.lambda_dice, self.lambda_sig].iter().any(|l| !(*l >= 0.0)) {
            return Err(NdslError::Config("loss weights must be non-negative".into()));
        }
        if !(self.fg_weight >= 1.0) {
            return Err(NdslError::Config(format!("fg_weight must be >= 1, got {}", self.fg_weight)));
        }
        if !(self.eps > 0.0) {
            return Err(NdslError::Config("eps must be positive".into()));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(NdslError::Config("focal_gamma must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_shapes(p: &[f64], g: &[f64]) -> Result<()> {
    if p.len() != g.len() || p.is_empty() {
        return Err(NdslError::Shape {
            pred: p.len(),
            target: g.len(),
        });
    }
    Ok(())
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1_impl(p: &[f64], g: &[f64], cfg: &LossConfig, grad: Option<&mut [f64]>, scale: f64) -> f64 {
    let wt = |gi: f64| if gi > cfg.fg_threshold { cfg.fg_weight } else { 1.0 };
    let wsum: f64 = g.iter().map(|&gi| wt(gi)).sum();
    let num: f64 = p.iter().zip(g).map(|(&pi, &gi)| wt(gi) * (pi - gi).abs()).sum();
    if let Some(d) = grad {
        for ((d, &pi), &gi) in d.iter_mut().zip(p).zip(g) {
            *d += scale * wt(gi) * sign(pi - gi) / wsum;
        }
    }
    num / wsum
}

fn dice_impl(p: &[f64], g: &[f64], cfg: &LossConfig, grad: Option<&mut [f64]>, scale: f64) -> f64 {
    let mut pg = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        pg += pi * gi;
        pp += pi * pi;
        gg += gi * gi;
    }
    let n = 2.0 * pg + cfg.eps;
    let d = pp + gg + cfg.eps;
    if let Some(out) = grad {
        for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
            *o -= scale * (2.0 * gi * d - n * 2.0 * pi) / (d * d);
        }
    }
    1.0 - n / d
}

fn focal_impl(p: &[f64], g: &[f64], cfg: &LossConfig, grad: Option<&mut [f64]>, scale: f64) -> f64 {
    let eps = cfg.eps;
    let gamma = cfg.focal_gamma;
    let inv_n = 1.0 / p.len() as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for (i, (&pi, &gi)) in p.iter().zip(g).enumerate() {
        let pc = pi.clamp(eps, 1.0 - eps);
        let bce = -gi * pc.ln() - (1.0 - gi) * (1.0 - pc).ln();
        let diff = pi - gi;
        let ad = diff.abs();
        let modw = if gamma == 0.0 { 1.0 } else { ad.powf(gamma) };
        total += modw * bce;
        if let Some(d) = grad.as_deref_mut() {
            let dmod = if gamma == 0.0 || ad == 0.0 {
                0.0
            } else {
                gamma * ad.powf(gamma - 1.0) * sign(diff)
            };
            let dbce = if pi > eps && pi < 1.0 - eps {
                -gi / pc + (1.0 - gi) / (1.0 - pc)
            } else {
                0.0
            };
            d[i] += scale * inv_n * (dmod * bce + modw * dbce);
        }
    }
    total * inv_n
}

/// Foreground-weighted mean absolute error, normalized by the total weight.
pub fn weighted_l1(p: &[f64], g: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_shapes(p, g)?;
    Ok(l1_impl(p, g, cfg, None, 0.0))
}

/// `1 − (2ΣPG + ε) / (ΣP² + ΣG² + ε)`.
pub fn soft_dice(p: &[f64], g: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_shapes(p, g)?;
    Ok(dice_impl(p, g, cfg, None, 0.0))
}

/// Mean of `|P−G|^γ · BCE(P, G)` with `P` clamped to `[ε, 1−ε]` inside the logs.
pub fn soft_focal(p: &[f64], g: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_shapes(p, g)?;
    Ok(focal_impl(p, g, cfg, None, 0.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub dice: f64,
    pub focal: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.l1 += o.l1;
        self.dice += o.dice;
        self.focal += o.focal;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.l1 *= s;
        self.dice *= s;
        self.focal *= s;
        self
    }
}

pub fn ndsl_loss(p: &[f64], g: &[f64], cfg: &LossConfig) -> Result<LossTerms> {
    check_shapes(p, g)?;
    let l1 = l1_impl(p, g, cfg, None, 0.0);
    let dice = dice_impl(p, g, cfg, None, 0.0);
    let focal = focal_impl(p, g, cfg, None, 0.0);
    Ok(LossTerms {
        total: cfg.lambda_l * l1 + cfg.lambda_dice * dice + cfg.lambda_sig * focal,
        l1,
        dice,
        focal,
    })
}

/// Loss terms and `∂total/∂P`.
pub fn ndsl_loss_grad(p: &[f64], g: &[f64], cfg: &LossConfig) -> Result<(LossTerms, Vec<f64>)> {
    check_shapes(p, g)?;
    let mut grad = vec![0.0; p.len()];
    let l1 = l1_impl(p, g, cfg, Some(&mut grad), cfg.lambda_l);
    let dice = dice_impl(p, g, cfg, Some(&mut grad), cfg.lambda_dice);
    let focal = focal_impl(p, g, cfg, Some(&mut grad), cfg.lambda_sig);
    let terms = LossTerms {
        total: cfg.lambda_l * l1 + cfg.lambda_dice * dice + cfg.lambda_sig * focal,
        l1,
        dice,
        focal,
    };
    Ok((terms, grad))
}

/// Navigation annotation of level `m` area-averaged to `size`² and rescaled to peak 1.
pub fn nav_target(p: &MagnificationPyramid, m: usize, size: usize) -> Result<Vec<f64>> {
    let nav = p
        .nav(m)
        .ok_or_else(|| NdslError::Dataset(format!("slide `{}` has no navigation annotation at level {m}", p.slide_id)))?;
    let mut t = nav.resample_area(size, size);
    t.max_normalize();
    Ok(t.data)
}

/// Encoder tokens and rendered targets for one slide, reused across steps.
#[derive(Debug, Clone)]
pub struct PreparedSlide {
    pub slide_id: String,
    pub tokens: Vec<TokenGrid>,
    pub targets: Vec<Vec<f64>>,
}

/// Encodes every slide once. Fails before any encoding if an annotation is missing.
pub fn prepare_dataset(
    slides: &[MagnificationPyramid],
    spec: &EncoderSpec,
    encoder: &dyn PatchEncoder,
    output_size: usize,
) -> Result<Vec<PreparedSlide>> {
    for s in slides {
        for m in 0..s.num_levels() {
            if s.nav(m).is_none() {
                return Err(NdslError::Dataset(format!(
                    "slide `{}` has no navigation annotation at level {m}",
                    s.slide_id
                )));
            }
        }
    }
    slides
        .iter()
        .map(|s| {
            let tokens = encode_pyramid(s, spec, encoder)?;
            let targets = (0..s.num_levels())
                .map(|m| nav_target(s, m, output_size))
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedSlide {
                slide_id: s.slide_id.clone(),
                tokens,
                targets,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    /// Slides per optimizer step; every level of each slide contributes.
    pub batch_slides: usize,
    /// Seed of the slide visiting order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            steps: 200,
            batch_slides: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub terms: LossTerms,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: McfnParams,
    pub curve: Vec<CurvePoint>,
}

/// Loss and parameter gradient for one slide level.
pub fn level_loss_grad(
    params: &McfnParams,
    slide: &PreparedSlide,
    m: usize,
    cfg: &LossConfig,
) -> Result<(LossTerms, McfnParams)> {
    let (heat, cache) = forward_level(params, &slide.tokens, m)?;
    let (terms, dp) = ndsl_loss_grad(&heat.map.data, &slide.targets[m], cfg)?;
    let mut grads = params.zeros_like();
    backward_level(params, &slide.tokens, &cache, &dp, &mut grads);
    Ok((terms, grads))
}

/// Mean loss terms over every level of every slide.
pub fn evaluate_loss(params: &McfnParams, slides: &[PreparedSlide], cfg: &LossConfig) -> Result<LossTerms> {
    let jobs: Vec<(usize, usize)> = slides
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.tokens.len()).map(move |m| (i, m)))
        .collect();
    if jobs.is_empty() {
        return Err(NdslError::Dataset("no slides to evaluate".into()));
    }
    let per: Vec<LossTerms> = jobs
        .par_iter()
        .map(|&(i, m)| {
            let (heat, _) = forward_level(params, &slides[i].tokens, m)?;
            ndsl_loss(&heat.map.data, &slides[i].targets[m], cfg)
        })
        .collect::<Result<_>>()?;
    let mut acc = LossTerms::default();
    per.iter().for_each(|t| acc.add(t));
    Ok(acc.scaled(1.0 / per.len() as f64))
}

/// Adam on the mean per-level loss of each mini-batch. Curve entries record
/// the batch loss before that step's update. Per-sample work runs in
/// parallel but is reduced in a fixed order, so results do not depend on the
/// thread count.
pub fn train_prepared(
    slides: &[PreparedSlide],
    mut params: McfnParams,
    loss: &LossConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    loss.validate()?;
    train.adam.validate().map_err(NdslError::Config)?;
    if slides.is_empty() {
        return Err(NdslError::Dataset("training set is empty".into()));
    }
    if train.batch_slides == 0 {
        return Err(NdslError::Config("batch_slides must be at least 1".into()));
    }
    let sizes: Vec<usize> = params.groups().iter().map(|(_, g)| g.len()).collect();
    let trainable: Vec<bool> = params.groups().iter().map(|(n, _)| params.is_trainable(n)).collect();
    let mut opt = Adam::new(train.adam.clone(), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(train.steps);
    let batch = train.batch_slides.min(slides.len());

    for step in 0..train.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if order.is_empty() {
                order = (0..slides.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            picked.push(order.pop().unwrap());
        }
        let jobs: Vec<(usize, usize)> = picked
            .iter()
            .flat_map(|&i| (0..slides[i].tokens.len()).map(move |m| (i, m)))
            .collect();
        let results: Vec<(LossTerms, McfnParams)> = jobs
            .par_iter()
            .map(|&(i, m)| level_loss_grad(&params, &slides[i], m, loss))
            .collect::<Result<_>>()?;
        let inv = 1.0 / results.len() as f64;
        let mut terms = LossTerms::default();
        let mut grads = params.zeros_like();
        for (t, g) in &results {
            terms.add(t);
            grads.add_assign(g);
        }
        grads.scale(inv);
        curve.push(CurvePoint {
            step,
            terms: terms.scaled(inv),
        });
        let gvec: Vec<Vec<f64>> = grads.groups().iter().map(|(_, g)| g.to_vec()).collect();
        let grefs: Vec<&[f64]> = gvec.iter().map(|g| &g[..]).collect();
        let prefs: Vec<&mut [f64]> = params.groups_mut().into_iter().map(|(_, g)| g).collect();
        opt.step(prefs, grefs, &trainable);
        if !params.is_finite() {
            return Err(NdslError::Mcfn(McfnError::NumericInput(format!(
                "parameters after step {step}"
            ))));
        }
        log::debug!("step {step}: loss {:.6}", curve[step].terms.total);
    }
    Ok(TrainOutcome { params, curve })
}

/// Encodes the slides and trains on them.
pub fn train_cmt(
    dataset: &[MagnificationPyramid],
    params: McfnParams,
    loss: &LossConfig,
    train: &TrainConfig,
    spec: &EncoderSpec,
    encoder: &dyn PatchEncoder,
) -> Result<TrainOutcome> {
    let prepared = prepare_dataset(dataset, spec, encoder, params.config.output_size)?;
    train_prepared(&prepared, params, loss, train)
}

pub fn write_loss_curve<W: Write>(mut out: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(out, "step,total,l1,dice,focal")?;
    for c in curve {
        let t = &c.terms;
        writeln!(out, "{},{},{},{},{}", c.step, t.total, t.l1, t.dice, t.focal)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyEncoder;
    use crate::mcfn::McfnConfig;
    use crate::pyramid::{generate_synthetic_slide, SynthConfig};
    use proptest::prelude::*;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn l1_examples() {
        let c = cfg();
        assert_eq!(weighted_l1(&[0.3, 0.7], &[0.3, 0.7], &c).unwrap(), 0.0);
        assert_eq!(weighted_l1(&[1.0, 0.0], &[0.0, 0.0], &c).unwrap(), 0.5);
        assert!((weighted_l1(&[0.0, 0.0], &[1.0, 0.0], &c).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_examples() {
        let c = cfg();
        assert!(soft_dice(&[0.2, 0.9, 0.4], &[0.2, 0.9, 0.4], &c).unwrap().abs() < 1e-6);
        assert_eq!(soft_dice(&[0.0, 0.0], &[0.0, 0.0], &c).unwrap(), 0.0);
        let d = soft_dice(&[1.0, 0.0], &[0.0, 1.0], &c).unwrap();
        assert!((d - (1.0 - 1e-6 / (2.0 + 1e-6))).abs() < 1e-15);
    }

    #[test]
    fn focal_examples() {
        let c = cfg();
        assert_eq!(soft_focal(&[0.1, 0.8], &[0.1, 0.8], &c).unwrap(), 0.0);
        let f = soft_focal(&[0.5], &[0.0], &c).unwrap();
        assert!((f - 0.25 * 2f64.ln()).abs() < 1e-12);
        let ce = LossConfig { focal_gamma: 0.0, ..c };
        let (p, g) = (0.3f64, 0.6f64);
        let want = -g * p.ln() - (1.0 - g) * (1.0 - p).ln();
        assert!((soft_focal(&[p], &[g], &ce).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn total_is_weighted_sum() {
        let c = cfg();
        let p = [0.1, 0.5, 0.9, 0.33];
        let g = [0.0, 0.7, 1.0, 0.0];
        let t = ndsl_loss(&p, &g, &c).unwrap();
        let want = 0.1 * weighted_l1(&p, &g, &c).unwrap() + soft_dice(&p, &g, &c).unwrap() + soft_focal(&p, &g, &c).unwrap();
        assert!((t.total - want).abs() < 1e-15);
        let only = LossConfig { lambda_dice: 0.0, lambda_sig: 0.0, ..c.clone() };
        assert_eq!(ndsl_loss(&p, &g, &only).unwrap().total, 0.1 * weighted_l1(&p, &g, &c).unwrap());
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(ndsl_loss(&[0.0], &[0.0, 1.0], &cfg()), Err(NdslError::Shape { .. })));
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let c = cfg();
        let p = [0.12, 0.55, 0.91, 0.33, 0.74];
        let g = [0.0, 0.7, 1.0, 0.0, 0.2];
        let (_, grad) = ndsl_loss_grad(&p, &g, &c).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p;
            a[i] += h;
            let mut b = p;
            b[i] -= h;
            let num = (ndsl_loss(&a, &g, &c).unwrap().total - ndsl_loss(&b, &g, &c).unwrap().total) / (2.0 * h);
            assert!((num - grad[i]).abs() < 1e-6 * num.abs().max(1.0), "{i}: {num} vs {}", grad[i]);
        }
    }

    proptest! {
        #[test]
        fn terms_vanish_at_target(g in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let t = ndsl_loss(&g, &g, &cfg()).unwrap();
            prop_assert!(t.l1 == 0.0 && t.focal == 0.0);
            prop_assert!(t.dice >= 0.0 && t.dice <= 1e-6);
            prop_assert!(t.total <= 3e-6);
        }

        #[test]
        fn terms_non_negative(pg in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40)) {
            let (p, g): (Vec<f64>, Vec<f64>) = pg.into_iter().unzip();
            let t = ndsl_loss(&p, &g, &cfg()).unwrap();
            prop_assert!(t.l1 >= 0.0 && t.dice >= -1e-15 && t.focal >= 0.0);
        }

        #[test]
        fn l1_increases_with_fg_weight(
            pg in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..20),
            w in 1.0f64..5.0,
            dw in 0.1f64..3.0,
        ) {
            let (mut p, mut g): (Vec<f64>, Vec<f64>) = pg.into_iter().unzip();
            // one foreground pixel that is wrong and one background pixel
            p.push(0.0);
            g.push(0.9);
            p.push(0.4);
            g.push(0.0);
            let fg: f64 = p.iter().zip(&g).filter(|(_, &gi)| gi > 0.0).map(|(pi, gi)| (pi - gi).abs()).sum();
            let nfg = g.iter().filter(|&&gi| gi > 0.0).count() as f64;
            let bg: f64 = p.iter().zip(&g).filter(|(_, &gi)| gi <= 0.0).map(|(pi, gi)| (pi - gi).abs()).sum();
            let nbg = g.len() as f64 - nfg;
            let a = weighted_l1(&p, &g, &LossConfig { fg_weight: w, ..cfg() }).unwrap();
            let b = weighted_l1(&p, &g, &LossConfig { fg_weight: w + dw, ..cfg() }).unwrap();
            // the weighted mean rises exactly when the foreground error rate beats the background one
            if fg / nfg > bg / nbg + 1e-9 {
                prop_assert!(b > a);
            }
        }
    }

    fn tiny_slide(seed: u64) -> MagnificationPyramid {
        let sc = SynthConfig {
            levels: 3,
            base_size: 64,
            ..Default::default()
        };
        generate_synthetic_slide(seed, &sc).unwrap()
    }

    fn tiny_setup() -> (EncoderSpec, ToyEncoder, McfnParams) {
        let spec = EncoderSpec {
            patch_size: 16,
            token_dim: 8,
            input_size: 64,
            ..Default::default()
        };
        let enc = ToyEncoder::new(&spec);
        let params = McfnParams::init(McfnConfig {
            dim: 8,
            levels: 3,
            output_size: 64,
            ..Default::default()
        });
        (spec, enc, params)
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (spec, enc, params) = tiny_setup();
        let slides = vec![tiny_slide(1)];
        let train = TrainConfig {
            adam: AdamConfig { lr: 0.0, ..Default::default() },
            steps: 4,
            ..Default::default()
        };
        let out = train_cmt(&slides, params.clone(), &cfg(), &train, &spec, &enc).unwrap();
        assert_eq!(out.params, params);
        assert!(out.curve.windows(2).all(|w| w[0].terms == w[1].terms));
    }

    #[test]
    fn training_reduces_loss() {
        let (spec, enc, params) = tiny_setup();
        let slides = vec![tiny_slide(2)];
        let train = TrainConfig { steps: 200, ..Default::default() };
        let out = train_cmt(&slides, params, &cfg(), &train, &spec, &enc).unwrap();
        assert!(out.curve.last().unwrap().terms.total < out.curve[0].terms.total);
    }

    #[test]
    fn training_is_deterministic() {
        let (spec, enc, params) = tiny_setup();
        let slides = vec![tiny_slide(3), tiny_slide(4)];
        let train = TrainConfig { steps: 5, batch_slides: 1, ..Default::default() };
        let a = train_cmt(&slides, params.clone(), &cfg(), &train, &spec, &enc).unwrap();
        let b = train_cmt(&slides, params, &cfg(), &train, &spec, &enc).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn frozen_gates_stay_zero() {
        let (spec, enc, _) = tiny_setup();
        let params = McfnParams::init(McfnConfig {
            dim: 8,
            levels: 3,
            output_size: 64,
            ablation: crate::mcfn::Ablation::without_cmb(),
            ..Default::default()
        });
        let slides = vec![tiny_slide(5)];
        let train = TrainConfig { steps: 3, ..Default::default() };
        let out = train_cmt(&slides, params, &cfg(), &train, &spec, &enc).unwrap();
        assert_eq!((out.params.u, out.params.w), (0.0, 0.0));
    }

    #[test]
    fn missing_annotation_is_dataset_error() {
        let (spec, enc, params) = tiny_setup();
        let mut s = tiny_slide(6);
        s.nav_annotations = None;
        let err = train_cmt(&[s], params, &cfg(), &TrainConfig::default(), &spec, &enc).unwrap_err();
        assert!(matches!(err, NdslError::Dataset(_)));
    }

    #[test]
    fn end_to_end_gradient_at_random_coordinates() {
        let (spec, enc, params) = tiny_setup();
        let prepared = prepare_dataset(&[tiny_slide(7)], &spec, &enc, 64).unwrap();
        let c = cfg();
        let (_, grads) = level_loss_grad(&params, &prepared[0], 1, &c).unwrap();
        let loss_at = |p: &McfnParams| {
            let (h, _) = forward_level(p, &prepared[0].tokens, 1).unwrap();
            ndsl_loss(&h.map.data, &prepared[0].targets[1], &c).unwrap().total
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = params.num_params();
        let h = 1e-5;
        for _ in 0..5 {
            let i = rand::Rng::random_range(&mut rng, 0..n);
            let mut a = params.clone();
            a.set_flat(i, params.get_flat(i) + h);
            let mut b = params.clone();
            b.set_flat(i, params.get_flat(i) - h);
            let num = (loss_at(&a) - loss_at(&b)) / (2.0 * h);
            let ana = grads.get_flat(i);
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-4, "{:?}: {ana} vs {num}", params.locate_flat(i));
        }
    }

    #[test]
    fn curve_csv_header() {
        let mut buf = Vec::new();
        let pt = CurvePoint { step: 0, terms: LossTerms { total: 1.0, l1: 0.5, dice: 0.25, focal: 0.125 } };
        write_loss_curve(&mut buf, &[pt]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,total,l1,dice,focal\n0,1,0.5,0.25,0.125\n");
    }
}
