use serde::{Deserialize, Serialize};

use super::{MagnificationLevel, MagnificationPyramid, PyramidError, Result};

/// A rectangle in one level's pixel frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub level_index: usize,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    /// Mean attention inside the window that produced the region.
    pub score: f64,
    pub step_selected: usize,
}

impl Region {
    pub fn key(&self) -> (usize, u32, u32, u32, u32) {
        (self.level_index, self.x, self.y, self.w, self.h)
    }

    pub fn is_within(&self, level: &MagnificationLevel) -> bool {
        self.w > 0
            && self.h > 0
            && self.x as u64 + self.w as u64 <= level.width as u64
            && self.y as u64 + self.h as u64 <= level.height as u64
    }

    /// True when `other` (same level) is fully contained in `self`.
    pub fn covers(&self, other: &Region) -> bool {
        self.level_index == other.level_index
            && self.x <= other.x
            && self.y <= other.y
            && self.x + self.w >= other.x + other.w
            && self.y + self.h >= other.y + other.h
    }
}

// Absorbs binary-representation noise before floor/ceil.
const ROUND_SLACK: f64 = 1e-9;

fn outward(lo: u32, extent: u32, ratio: f64, bound: u32) -> (u32, u32) {
    let a = lo as f64 * ratio;
    let b = (lo as f64 + extent as f64) * ratio;
    let start = ((a + ROUND_SLACK).floor().max(0.0) as u64).min(bound as u64);
    let end = ((b - ROUND_SLACK).ceil().max(0.0) as u64).min(bound as u64);
    let start = start.min(bound.saturating_sub(1) as u64);
    let end = end.max(start + 1);
    (start as u32, (end - start) as u32)
}

/// Re-expresses `r` in the pixel frame of `target`, rounding outward and
/// clamping to the level bounds. Score and step are carried over.
pub fn map_region_between(r: &Region, levels: &[MagnificationLevel], target: usize) -> Result<Region> {
    let src = levels.get(r.level_index).ok_or(PyramidError::LevelNotFound(r.level_index))?;
    let dst = levels.get(target).ok_or(PyramidError::LevelNotFound(target))?;
    if r.level_index == target {
        return Ok(*r);
    }
    let ratio = dst.magnification / src.magnification;
    let (x, w) = outward(r.x, r.w, ratio, dst.width);
    let (y, h) = outward(r.y, r.h, ratio, dst.height);
    Ok(Region {
        level_index: target,
        x,
        y,
        w,
        h,
        score: r.score,
        step_selected: r.step_selected,
    })
}

pub fn map_region(r: &Region, target: usize, pyramid: &MagnificationPyramid) -> Result<Region> {
    map_region_between(r, &pyramid.levels, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn levels() -> Vec<MagnificationLevel> {
        [0.625, 1.25, 2.5, 5.0, 10.0]
            .iter()
            .enumerate()
            .map(|(i, &mag)| {
                let side = (128.0 * mag) as u32;
                MagnificationLevel {
                    index: i,
                    magnification: mag,
                    width: side,
                    height: side,
                    scale_to_base: 10.0 / mag,
                }
            })
            .collect()
    }

    fn reg(level: usize, x: u32, y: u32, w: u32, h: u32) -> Region {
        Region {
            level_index: level,
            x,
            y,
            w,
            h,
            score: 0.5,
            step_selected: 2,
        }
    }

    #[test]
    fn zoom_by_eight() {
        let out = map_region_between(&reg(1, 3, 4, 2, 2), &levels(), 4).unwrap();
        assert_eq!((out.x, out.y, out.w, out.h), (24, 32, 16, 16));
        assert_eq!(out.score, 0.5);
        assert_eq!(out.step_selected, 2);
    }

    #[test]
    fn identity_on_same_level() {
        let r = reg(2, 7, 9, 5, 3);
        assert_eq!(map_region_between(&r, &levels(), 2).unwrap(), r);
    }

    #[test]
    fn zoom_out_rounds_outward() {
        let out = map_region_between(&reg(4, 5, 5, 3, 3), &levels(), 1).unwrap();
        assert_eq!((out.x, out.y, out.w, out.h), (0, 0, 1, 1));
    }

    #[test]
    fn unknown_level() {
        assert!(matches!(
            map_region_between(&reg(1, 0, 0, 1, 1), &levels(), 9),
            Err(PyramidError::LevelNotFound(9))
        ));
        assert!(matches!(
            map_region_between(&reg(7, 0, 0, 1, 1), &levels(), 0),
            Err(PyramidError::LevelNotFound(7))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_covers(l1 in 0usize..5, l2 in 0usize..5, x in 0u32..60, y in 0u32..60, w in 1u32..20, h in 1u32..20) {
            let lv = levels();
            let side = lv[l1].width;
            let x = x % side;
            let y = y % side;
            let w = w.min(side - x);
            let h = h.min(side - y);
            let r = reg(l1, x, y, w, h);
            let there = map_region_between(&r, &lv, l2).unwrap();
            prop_assert!(there.is_within(&lv[l2]));
            let back = map_region_between(&there, &lv, l1).unwrap();
            prop_assert!(back.covers(&r));
            let ratio = lv[l2].magnification / lv[l1].magnification;
            let exact = |v: u32| (v as f64 * ratio).fract() == 0.0;
            if exact(x) && exact(y) && exact(w) && exact(h) {
                prop_assert_eq!(back, r);
            }
        }
    }
}
