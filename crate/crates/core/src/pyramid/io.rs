//! Directory format: `manifest.json` plus one PNG per raster, navigation map
//! (16-bit grayscale, value/65535) and tumor mask (8-bit, 0 or 255).

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::{BinaryMask, FloatMap, MagnificationLevel, MagnificationPyramid, PyramidError, Result, SlideLabel};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub index: usize,
    pub magnification: f64,
    pub width: u32,
    pub height: u32,
    pub raster: String,
    pub nav: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub slide_id: String,
    pub label: Option<SlideLabel>,
    pub levels: Vec<LevelEntry>,
    pub tumor_mask: Option<String>,
}

pub fn save_pyramid(p: &MagnificationPyramid, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(p.levels.len());
    for (m, lvl) in p.levels.iter().enumerate() {
        let raster = format!("level_{m}.png");
        p.rasters[m].save(dir.join(&raster))?;
        let nav = match p.nav(m) {
            Some(g) => {
                let name = format!("nav_{m}.png");
                let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(g.width as u32, g.height as u32, |x, y| {
                    Luma([(g.get(x as usize, y as usize).clamp(0.0, 1.0) * 65535.0).round() as u16])
                });
                buf.save(dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(LevelEntry {
            index: lvl.index,
            magnification: lvl.magnification,
            width: lvl.width,
            height: lvl.height,
            raster,
            nav,
        });
    }
    let tumor_mask = match &p.tumor_mask {
        Some(mask) => {
            let name = "tumor.png".to_string();
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(mask.width as u32, mask.height as u32, |x, y| {
                Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
            });
            buf.save(dir.join(&name))?;
            Some(name)
        }
        None => None,
    };
    let manifest = Manifest {
        slide_id: p.slide_id.clone(),
        label: p.label,
        levels: entries,
        tumor_mask,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn check_dims(what: String, expected: (u32, u32), actual: (u32, u32)) -> Result<()> {
    if expected != actual {
        return Err(PyramidError::DimensionMismatch { what, expected, actual });
    }
    Ok(())
}

pub fn load_pyramid(dir: &Path) -> Result<MagnificationPyramid> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(PyramidError::MissingManifest(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.levels.is_empty() {
        return Err(PyramidError::Invalid("manifest lists no levels".into()));
    }
    let top_mag = manifest
        .levels
        .iter()
        .map(|l| l.magnification)
        .fold(f64::NEG_INFINITY, f64::max);

    let mut levels = Vec::new();
    let mut rasters: Vec<RgbImage> = Vec::new();
    let mut navs = Vec::new();
    let nav_count = manifest.levels.iter().filter(|l| l.nav.is_some()).count();
    if nav_count != 0 && nav_count != manifest.levels.len() {
        return Err(PyramidError::Invalid(format!(
            "navigation maps present for {nav_count} of {} levels",
            manifest.levels.len()
        )));
    }
    for entry in &manifest.levels {
        let img = image::open(dir.join(&entry.raster))?.to_rgb8();
        check_dims(
            format!("raster {}", entry.raster),
            (entry.width, entry.height),
            img.dimensions(),
        )?;
        if let Some(nav) = &entry.nav {
            let g = image::open(dir.join(nav))?.to_luma16();
            check_dims(format!("navigation map {nav}"), (entry.width, entry.height), g.dimensions())?;
            let data = g.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
            navs.push(FloatMap::from_vec(entry.width as usize, entry.height as usize, data));
        }
        levels.push(MagnificationLevel {
            index: entry.index,
            magnification: entry.magnification,
            width: entry.width,
            height: entry.height,
            scale_to_base: top_mag / entry.magnification,
        });
        rasters.push(img);
    }
    let tumor_mask = match &manifest.tumor_mask {
        Some(name) => {
            let top = manifest
                .levels
                .iter()
                .max_by(|a, b| a.magnification.total_cmp(&b.magnification))
                .expect("non-empty");
            let img = image::open(dir.join(name))?;
            let g = img.to_luma8();
            check_dims(format!("tumor mask {name}"), (top.width, top.height), g.dimensions())?;
            let mut data = Vec::with_capacity(g.as_raw().len());
            for &v in g.as_raw() {
                match v {
                    0 => data.push(0),
                    255 => data.push(1),
                    other => {
                        return Err(PyramidError::ValueOutOfRange {
                            what: format!("tumor mask {name}"),
                            detail: format!("pixel value {other} is neither 0 nor 255"),
                        })
                    }
                }
            }
            Some(BinaryMask {
                width: top.width as usize,
                height: top.height as usize,
                data,
            })
        }
        None => None,
    };
    MagnificationPyramid::new(
        manifest.slide_id,
        levels,
        rasters,
        if navs.is_empty() { None } else { Some(navs) },
        tumor_mask,
        manifest.label,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{generate_synthetic_slide, SynthConfig};

    fn slide() -> MagnificationPyramid {
        let cfg = SynthConfig {
            base_size: 64,
            levels: 3,
            ..SynthConfig::default()
        };
        generate_synthetic_slide(9, &cfg).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = slide();
        save_pyramid(&p, dir.path()).unwrap();
        let q = load_pyramid(dir.path()).unwrap();
        assert_eq!(p.rasters, q.rasters);
        assert_eq!(p.tumor_mask, q.tumor_mask);
        assert_eq!(p.levels, q.levels);
        assert_eq!(p.label, q.label);
        for (a, b) in p.nav_annotations.unwrap().iter().zip(q.nav_annotations.unwrap().iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-15);
            }
            assert_eq!(b.max(), 1.0);
        }
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_pyramid(dir.path()), Err(PyramidError::MissingManifest(_))));
    }

    #[test]
    fn raster_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(99, 100).save(dir.path().join("level_0.png")).unwrap();
        let manifest = Manifest {
            slide_id: "s".into(),
            label: None,
            levels: vec![LevelEntry {
                index: 0,
                magnification: 1.0,
                width: 100,
                height: 100,
                raster: "level_0.png".into(),
                nav: None,
            }],
            tumor_mask: None,
        };
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&manifest).unwrap()).unwrap();
        match load_pyramid(dir.path()) {
            Err(PyramidError::DimensionMismatch { expected, actual, .. }) => {
                assert_eq!(expected, (100, 100));
                assert_eq!(actual, (99, 100));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tumor_mask_value_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = slide();
        save_pyramid(&p, dir.path()).unwrap();
        let top = p.top_level();
        let bad: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel(top.width, top.height, Luma([7]));
        bad.save(dir.path().join("tumor.png")).unwrap();
        assert!(matches!(load_pyramid(dir.path()), Err(PyramidError::ValueOutOfRange { .. })));
    }

    #[test]
    fn nav_quantization_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = slide();
        let nav = p.nav_annotations.as_mut().unwrap();
        nav[0].data[0] = 1.0;
        nav[0].data[1] = 0.0;
        save_pyramid(&p, dir.path()).unwrap();
        let raw = image::open(dir.path().join("nav_0.png")).unwrap().to_luma16();
        assert_eq!(raw.as_raw()[0], 65535);
        assert_eq!(raw.as_raw()[1], 0);
        let q = load_pyramid(dir.path()).unwrap();
        assert_eq!(q.nav(0).unwrap().data[0], 1.0);
        assert_eq!(q.nav(0).unwrap().data[1], 0.0);
    }
}
