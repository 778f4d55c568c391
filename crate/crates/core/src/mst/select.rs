//! Ranking heatmap windows into candidate regions.

use std::collections::HashSet;

use crate::mcfn::Heatmap;
use crate::pyramid::{MagnificationLevel, Region};

use super::memory::RegionKey;
use super::MstError;

/// One window of the heatmap partition with its mean attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Mean attention of every `cells`×`cells` window, row-major.
pub fn window_scores(h: &Heatmap, cells: usize) -> Result<Vec<Window>, MstError> {
    let (w, ht) = (h.map.width, h.map.height);
    if cells == 0 || w % cells != 0 || ht % cells != 0 {
        return Err(MstError::Partition(format!(
            "{cells}-pixel windows do not tile a {w}x{ht} heatmap"
        )));
    }
    let (rows, cols) = (ht / cells, w / cells);
    let inv = 1.0 / (cells * cells) as f64;
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let mut s = 0.0;
            for y in row * cells..(row + 1) * cells {
                s += h.map.data[y * w + col * cells..y * w + (col + 1) * cells].iter().sum::<f64>();
            }
            out.push(Window { row, col, score: s * inv });
        }
    }
    Ok(out)
}

fn span(i: usize, n: usize, extent: u32) -> (u32, u32) {
    let e = extent as u64;
    let lo = (i as u64 * e) / n as u64;
    let hi = ((i as u64 + 1) * e).div_ceil(n as u64).max(lo + 1).min(e);
    let lo = lo.min(e.saturating_sub(1));
    (lo as u32, (hi - lo) as u32)
}

/// Level-pixel rectangle covered by a window, rounded outward.
pub fn window_region(win: &Window, rows: usize, cols: usize, level: &MagnificationLevel, step: usize) -> Region {
    let (x, w) = span(win.col, cols, level.width);
    let (y, h) = span(win.row, rows, level.height);
    Region {
        level_index: level.index,
        x,
        y,
        w,
        h,
        score: win.score,
        step_selected: step,
    }
}

/// Up to `k` highest-scoring windows not in `exclusion`, ranked by mean
/// attention with ties broken by (row, col). `allow` optionally restricts
/// the candidates.
pub fn select_top_regions(
    h: &Heatmap,
    k: usize,
    exclusion: &HashSet<RegionKey>,
    region_cells: usize,
    level: &MagnificationLevel,
    step: usize,
    allow: Option<&dyn Fn(&Region) -> bool>,
) -> Result<Vec<Region>, MstError> {
    if k == 0 {
        return Err(MstError::Partition("k must be at least 1".into()));
    }
    let mut wins = window_scores(h, region_cells)?;
    let rows = h.map.height / region_cells;
    let cols = h.map.width / region_cells;
    wins.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    let mut taken = HashSet::new();
    let mut out = Vec::with_capacity(k);
    for win in &wins {
        if out.len() == k {
            break;
        }
        let r = window_region(win, rows, cols, level, step);
        // small levels can map several windows onto the same pixels
        if exclusion.contains(&r.key()) || taken.contains(&r.key()) {
            continue;
        }
        if let Some(f) = allow {
            if !f(&r) {
                continue;
            }
        }
        taken.insert(r.key());
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::FloatMap;

    fn level(side: u32) -> MagnificationLevel {
        MagnificationLevel {
            index: 1,
            magnification: 1.25,
            width: side,
            height: side,
            scale_to_base: 1.0,
        }
    }

    fn heat(side: usize, f: impl Fn(usize, usize) -> f64) -> Heatmap {
        let mut m = FloatMap::zeros(side, side);
        for y in 0..side {
            for x in 0..side {
                m.set(x, y, f(x, y));
            }
        }
        Heatmap { level_index: 1, map: m }
    }

    #[test]
    fn uniform_ties_go_lexicographic() {
        let h = heat(16, |_, _| 0.5);
        let got = select_top_regions(&h, 2, &HashSet::new(), 4, &level(64), 0, None).unwrap();
        assert_eq!((got[0].x, got[0].y), (0, 0));
        assert_eq!((got[1].x, got[1].y), (16, 0));
        assert_eq!(got[0].w, 16);
    }

    #[test]
    fn hot_window_first() {
        let h = heat(16, |x, y| if (8..12).contains(&x) && (4..8).contains(&y) { 1.0 } else { 0.0 });
        let got = select_top_regions(&h, 1, &HashSet::new(), 4, &level(32), 0, None).unwrap();
        assert_eq!((got[0].x, got[0].y, got[0].w, got[0].h), (16, 8, 8, 8));
        assert_eq!(got[0].score, 1.0);
    }

    #[test]
    fn complement_of_exclusion_in_rank_order() {
        let h = heat(16, |x, y| ((x * 7 + y * 13) % 11) as f64);
        let lvl = level(16);
        let all = window_scores(&h, 4).unwrap();
        let excl: HashSet<RegionKey> = [0usize, 5, 9]
            .iter()
            .map(|&i| window_region(&all[i], 4, 4, &lvl, 0).key())
            .collect();
        let got = select_top_regions(&h, 16, &excl, 4, &lvl, 0, None).unwrap();
        assert_eq!(got.len(), 13);
        // oracle: stable sort by score descending on the row-major list
        let mut rest: Vec<&Window> = all
            .iter()
            .enumerate()
            .filter(|(i, _)| ![0, 5, 9].contains(i))
            .map(|(_, w)| w)
            .collect();
        for i in 0..rest.len() {
            for j in 0..rest.len() - 1 - i {
                if rest[j + 1].score > rest[j].score {
                    rest.swap(j, j + 1);
                }
            }
        }
        for (r, w) in got.iter().zip(rest) {
            assert_eq!((r.x, r.y), (w.col as u32 * 4, w.row as u32 * 4));
            assert!(!excl.contains(&r.key()));
        }
    }

    #[test]
    fn bad_partition() {
        let h = heat(10, |_, _| 0.0);
        assert!(matches!(
            select_top_regions(&h, 1, &HashSet::new(), 4, &level(10), 0, None),
            Err(MstError::Partition(_))
        ));
    }

    #[test]
    fn tiny_level_has_no_duplicate_regions() {
        let h = heat(16, |x, _| x as f64);
        let got = select_top_regions(&h, 16, &HashSet::new(), 4, &level(2), 0, None).unwrap();
        let keys: HashSet<_> = got.iter().map(|r| r.key()).collect();
        assert_eq!(keys.len(), got.len());
        assert_eq!(got.len(), 4);
    }
}
