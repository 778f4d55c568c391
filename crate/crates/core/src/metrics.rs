//! Navigation-consistency and tumor-coverage metrics.
//!
//! Maps are flat row-major buffers. Every ranking breaks ties by ascending
//! cell index so results are reproducible bit for bit.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcfn::Heatmap;
use crate::pyramid::{BinaryMask, MagnificationPyramid};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("maps have {a} and {b} cells")]
    Shape { a: usize, b: usize },
    #[error("correlation undefined: {0}")]
    Undefined(&'static str),
    #[error("distribution has no positive mass")]
    ZeroMass,
    #[error("tumor mask is empty, recall undefined")]
    EmptyMask,
    #[error("slide `{0}` has no {1}")]
    MissingAnnotation(String, &'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(MetricError::Shape { a, b });
    }
    Ok(())
}

/// 1-based average ranks, ascending.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation with average ranks for ties.
pub fn spearman(p: &[f64], g: &[f64]) -> Result<f64> {
    check(p.len(), g.len())?;
    pearson(&average_ranks(p), &average_ranks(g)).ok_or(MetricError::Undefined("a map is constant"))
}

/// Cell indices sorted by descending value, ties by ascending index.
pub fn descending_order(x: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx
}

fn top_count(n: usize, q: f64) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n)
}

/// Indicator of the top `⌈q·n⌉` cells.
pub fn top_fraction_set(x: &[f64], q: f64) -> Vec<bool> {
    let k = top_count(x.len(), q);
    let mut sel = vec![false; x.len()];
    for &i in &descending_order(x)[..k] {
        sel[i] = true;
    }
    sel
}

/// Average precision of `p`'s ranking against the top 5% of `g`.
pub fn ap_top5(p: &[f64], g: &[f64]) -> Result<f64> {
    check(p.len(), g.len())?;
    let pos = top_fraction_set(g, 0.05);
    let npos = pos.iter().filter(|&&b| b).count();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in descending_order(p).iter().enumerate() {
        if pos[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / npos as f64)
}

fn normalized(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(MetricError::ZeroMass);
    }
    let s: f64 = x.iter().sum();
    if !(s > 0.0) {
        return Err(MetricError::ZeroMass);
    }
    Ok(x.iter().map(|v| v / s).collect())
}

/// Base-2 Jensen–Shannon divergence of the two maps viewed as distributions.
pub fn js_divergence(p: &[f64], g: &[f64]) -> Result<f64> {
    check(p.len(), g.len())?;
    let a = normalized(p)?;
    let b = normalized(g)?;
    let mut js = 0.0;
    for (&x, &y) in a.iter().zip(&b) {
        let m = 0.5 * (x + y);
        if x > 0.0 {
            js += 0.5 * x * (x / m).log2();
        }
        if y > 0.0 {
            js += 0.5 * y * (y / m).log2();
        }
    }
    Ok(js.clamp(0.0, 1.0))
}

/// Share of the top `⌈q·n⌉` cells of `p` that lie in the tumor mask.
/// An empty mask yields 0.
pub fn ranked_precision(p: &[f64], mask: &[bool], q: f64) -> Result<f64> {
    check(p.len(), mask.len())?;
    if !mask.iter().any(|&b| b) {
        log::warn!("ranked precision on an empty tumor mask, reporting 0");
        return Ok(0.0);
    }
    let k = top_count(p.len(), q);
    let hits = descending_order(p)[..k].iter().filter(|&&i| mask[i]).count();
    Ok(hits as f64 / k as f64)
}

/// Share of tumor cells that fall within the top `⌈q·n⌉` cells of `p`.
pub fn tumor_recall(p: &[f64], mask: &[bool], q: f64) -> Result<f64> {
    check(p.len(), mask.len())?;
    let total = mask.iter().filter(|&&b| b).count();
    if total == 0 {
        return Err(MetricError::EmptyMask);
    }
    let k = top_count(p.len(), q);
    let hits = descending_order(p)[..k].iter().filter(|&&i| mask[i]).count();
    Ok(hits as f64 / total as f64)
}

pub fn mask_bools(m: &BinaryMask) -> Vec<bool> {
    m.data.iter().map(|&v| v != 0).collect()
}

/// Metrics for one slide at one level. Undefined values are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub slide_id: String,
    pub level: String,
    pub rho: f64,
    pub ap5: f64,
    pub jsd: f64,
    pub p10: f64,
    pub rec: f64,
}

impl MetricRow {
    fn values(&self) -> [f64; 5] {
        [self.rho, self.ap5, self.jsd, self.p10, self.rec]
    }
}

/// Scores each level's heatmap against the slide's annotations.
pub fn evaluate_slide(pyramid: &MagnificationPyramid, heatmaps: &[Heatmap], q: f64) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(heatmaps.len());
    for h in heatmaps {
        let side = h.map.width;
        let p = &h.map.data;
        let g = pyramid.nav(h.level_index).map(|nav| {
            let mut t = nav.resample_area(side, h.map.height);
            t.max_normalize();
            t.data
        });
        let mask = pyramid.tumor_mask_on(side, h.map.height).map(|m| mask_bools(&m));
        let nan = f64::NAN;
        let (rho, ap5, jsd) = match &g {
            Some(g) => (
                spearman(p, g).unwrap_or(nan),
                ap_top5(p, g)?,
                js_divergence(p, g).unwrap_or(nan),
            ),
            None => (nan, nan, nan),
        };
        let (p10, rec) = match &mask {
            Some(m) => (ranked_precision(p, m, q)?, tumor_recall(p, m, q).unwrap_or(nan)),
            None => (nan, nan),
        };
        rows.push(MetricRow {
            slide_id: pyramid.slide_id.clone(),
            level: h.level_index.to_string(),
            rho,
            ap5,
            jsd,
            p10,
            rec,
        });
    }
    Ok(rows)
}

fn nan_mean(vals: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = vals.filter(|v| !v.is_nan()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn mean_row<'a>(rows: impl Iterator<Item = &'a MetricRow> + Clone, level: String) -> MetricRow {
    let col = |k: usize| nan_mean(rows.clone().map(|r| r.values()[k]));
    MetricRow {
        slide_id: "mean".into(),
        level,
        rho: col(0),
        ap5: col(1),
        jsd: col(2),
        p10: col(3),
        rec: col(4),
    }
}

/// Per-level means (slide id `mean`) followed by the overall mean (level `all`).
pub fn aggregate(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut levels: Vec<&str> = rows.iter().map(|r| r.level.as_str()).collect();
    levels.sort_by_key(|l| l.parse::<usize>().unwrap_or(usize::MAX));
    levels.dedup();
    let mut out: Vec<MetricRow> = levels
        .iter()
        .map(|&l| mean_row(rows.iter().filter(move |r| r.level == l), l.to_string()))
        .collect();
    out.push(mean_row(rows.iter(), "all".into()));
    out
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

/// Writes per-slide rows then the aggregates.
pub fn write_report<W: Write>(mut out: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(out, "slide_id,level,rho,ap5,jsd,p10,rec")?;
    for r in rows.iter().chain(aggregate(rows).iter()) {
        let v = r.values();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.slide_id,
            r.level,
            fmt(v[0]),
            fmt(v[1]),
            fmt(v[2]),
            fmt(v[3]),
            fmt(v[4])
        )?;
    }
    Ok(())
}
