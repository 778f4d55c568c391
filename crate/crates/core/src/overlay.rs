//! Heatmap and trace overlays on level rasters.

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::mcfn::Heatmap;
use crate::pyramid::{MagnificationPyramid, Region};

#[derive(Debug, Error)]
pub enum OverlayError {
    #[error("level mismatch: {0}")]
    Level(String),
}

#[derive(Debug, Clone, Copy)]
pub struct OverlayOptions {
    /// Blend weight at heat 1; weight scales linearly with heat.
    pub max_alpha: f64,
    pub draw_labels: bool,
}

impl Default for OverlayOptions {
    fn default() -> Self {
        Self {
            max_alpha: 0.6,
            draw_labels: true,
        }
    }
}

/// Blue to red through green and yellow.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let t = v * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    [0, 1, 2].map(|c| stops[i][c] * (1.0 - f) + stops[i + 1][c] * f)
}

const STEP_COLORS: [[u8; 3]; 8] = [
    [255, 255, 255],
    [255, 0, 255],
    [0, 200, 255],
    [255, 140, 0],
    [120, 255, 120],
    [255, 60, 60],
    [160, 120, 255],
    [255, 230, 0],
];

pub fn step_color(step: usize) -> Rgb<u8> {
    Rgb(STEP_COLORS[step % STEP_COLORS.len()])
}

// 3x5 digit glyphs, one row per nibble (bit 2 is the left column).
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Draws `n` in the 3x5 font with its top-left at (x, y).
pub fn draw_number(img: &mut RgbImage, n: usize, x: i64, y: i64, c: Rgb<u8>) {
    for (k, ch) in n.to_string().bytes().enumerate() {
        let g = DIGITS[(ch - b'0') as usize];
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    put(img, x + k as i64 * 4 + col as i64, y + row as i64, c);
                }
            }
        }
    }
}

pub fn draw_outline(img: &mut RgbImage, r: &Region, c: Rgb<u8>) {
    let (x0, y0) = (r.x as i64, r.y as i64);
    let (x1, y1) = (x0 + r.w as i64 - 1, y0 + r.h as i64 - 1);
    for x in x0..=x1 {
        put(img, x, y0, c);
        put(img, x, y1, c);
    }
    for y in y0..=y1 {
        put(img, x0, y, c);
        put(img, x1, y, c);
    }
}

/// Blends `heat`, nearest-sampled onto the raster; heat 0 leaves a pixel
/// untouched.
pub fn blend_heat(raster: &RgbImage, heat: &crate::pyramid::FloatMap, max_alpha: f64) -> RgbImage {
    let (w, h) = raster.dimensions();
    let mut out = raster.clone();
    for y in 0..h {
        let hy = ((y as u64 * heat.height as u64) / h as u64) as usize;
        for x in 0..w {
            let hx = ((x as u64 * heat.width as u64) / w as u64) as usize;
            let v = heat.get(hx, hy).clamp(0.0, 1.0);
            if v == 0.0 {
                continue;
            }
            let a = max_alpha * v;
            let cm = colormap(v);
            let p = out.get_pixel_mut(x, y);
            for c in 0..3 {
                p.0[c] = ((1.0 - a) * p.0[c] as f64 + a * cm[c]).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Overlay for level `m`: heatmap blend, then outlines and step labels for
/// the regions selected at that level. Returns the steps that were labeled.
pub fn render_level_overlay(
    pyramid: &MagnificationPyramid,
    m: usize,
    heatmap: Option<&Heatmap>,
    regions: &[Region],
    opts: &OverlayOptions,
) -> Result<(RgbImage, Vec<usize>), OverlayError> {
    let raster = pyramid
        .rasters
        .get(m)
        .ok_or_else(|| OverlayError::Level(format!("pyramid has no level {m}")))?;
    let mut img = match heatmap {
        Some(h) if h.level_index != m => {
            return Err(OverlayError::Level(format!(
                "heatmap is for level {}, rendering level {m}",
                h.level_index
            )))
        }
        Some(h) => blend_heat(raster, &h.map, opts.max_alpha),
        None => raster.clone(),
    };
    let mut steps = Vec::new();
    for r in regions.iter().filter(|r| r.level_index == m) {
        let c = step_color(r.step_selected);
        draw_outline(&mut img, r, c);
        if opts.draw_labels {
            draw_number(&mut img, r.step_selected, r.x as i64 + 2, r.y as i64 + 2, c);
        }
        if !steps.contains(&r.step_selected) {
            steps.push(r.step_selected);
        }
    }
    Ok((img, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{generate_synthetic_slide, SynthConfig};
    use crate::pyramid::FloatMap;

    fn slide() -> MagnificationPyramid {
        generate_synthetic_slide(3, &SynthConfig::default()).unwrap()
    }

    #[test]
    fn zero_heat_is_identity() {
        let p = slide();
        let m = p.top_index();
        let h = Heatmap {
            level_index: m,
            map: FloatMap::zeros(256, 256),
        };
        let (img, _) = render_level_overlay(&p, m, Some(&h), &[], &OverlayOptions::default()).unwrap();
        assert_eq!(&img, &p.rasters[m]);
    }

    #[test]
    fn output_matches_raster_size() {
        let p = slide();
        for m in 0..p.num_levels() {
            let h = Heatmap {
                level_index: m,
                map: FloatMap::filled(256, 256, 0.7),
            };
            let (img, _) = render_level_overlay(&p, m, Some(&h), &[], &OverlayOptions::default()).unwrap();
            assert_eq!(img.dimensions(), p.rasters[m].dimensions());
            assert_ne!(&img, &p.rasters[m]);
        }
    }

    #[test]
    fn three_steps_three_labels() {
        let p = slide();
        let m = p.top_index();
        let regions: Vec<Region> = (0..3)
            .map(|s| Region {
                level_index: m,
                x: 40 * s as u32,
                y: 10,
                w: 32,
                h: 32,
                score: 0.5,
                step_selected: s + 1,
            })
            .collect();
        let (img, steps) = render_level_overlay(&p, m, None, &regions, &OverlayOptions::default()).unwrap();
        assert_eq!(steps, vec![1, 2, 3]);
        for r in &regions {
            assert_eq!(*img.get_pixel(r.x, r.y), step_color(r.step_selected));
        }
    }

    #[test]
    fn wrong_level_heatmap_rejected() {
        let p = slide();
        let h = Heatmap {
            level_index: 0,
            map: FloatMap::zeros(4, 4),
        };
        assert!(render_level_overlay(&p, 1, Some(&h), &[], &OverlayOptions::default()).is_err());
        assert!(render_level_overlay(&p, 99, None, &[], &OverlayOptions::default()).is_err());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 255.0]);
        assert_eq!(colormap(1.0), [255.0, 0.0, 0.0]);
    }
}
