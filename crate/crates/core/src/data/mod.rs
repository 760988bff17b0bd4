//! Samples, synthetic generation, raster I/O and augmentation.

mod augment;
mod pnm;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{augment, GeomTransform};
pub use pnm::{read_pnm, write_pgm, write_pnm, Raster};
pub use synth::{gen_synthetic, ScaleMix, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Channel-major image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_f64(
            &[self.channels, self.height, self.width],
            &self.data.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        )
        .expect("image values are finite")
    }
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    /// Pixels equal to `class`.
    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

const MASK_SUFFIX: &str = "_mask";

/// Writes `id.pgm`/`id.ppm` and `id_mask.pgm`.
pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let img = &sample.image;
    let bytes: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let ext = if img.channels == 1 { "pgm" } else { "ppm" };
    write_pnm(&dir.join(format!("{}.{ext}", sample.id)), &Raster::planar(img.channels, img.height, img.width, &bytes)?)?;
    write_pgm(&dir.join(format!("{}{MASK_SUFFIX}.pgm", sample.id)), sample.mask.height, sample.mask.width, &sample.mask.data)
}

/// Outcome of scanning a dataset directory.
#[derive(Debug, Default)]
pub struct Loaded {
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

/// Pairs `x.pgm`/`x.ppm` with `x_mask.pgm`, sorted by stem. Images are scaled
/// to `[0, 1]`; mask values must be below `classes`.
pub fn load_dataset(dir: &Path, classes: usize) -> Result<Loaded> {
    let data_err = |path: &Path, detail: String| Error::Data {
        path: path.to_path_buf(),
        detail,
    };
    let entries = fs::read_dir(dir).map_err(|e| data_err(dir, e.to_string()))?;
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()).map(str::to_owned),
            path.extension().and_then(|s| s.to_str()).map(str::to_ascii_lowercase),
        ) else {
            continue;
        };
        if ext != "pgm" && ext != "ppm" {
            continue;
        }
        match stem.strip_suffix(MASK_SUFFIX) {
            Some(base) if ext == "pgm" => {
                masks.insert(base.to_owned(), path);
            }
            _ => {
                if let Some(prev) = images.insert(stem.clone(), path.clone()) {
                    return Err(data_err(&path, format!("duplicate image stem (also {})", prev.display())));
                }
            }
        }
    }

    let mut out = Loaded::default();
    for stem in masks.keys().filter(|s| !images.contains_key(*s)) {
        out.warnings.push(format!("mask {} has no matching image", masks[stem].display()));
    }
    for (stem, img_path) in images {
        let Some(mask_path) = masks.get(&stem) else {
            return Err(data_err(&img_path, format!("missing mask {stem}{MASK_SUFFIX}.pgm")));
        };
        let img = read_pnm(&img_path)?;
        let mask = read_pnm(mask_path)?;
        if mask.channels != 1 {
            return Err(data_err(mask_path, "mask must be single-channel (PGM)".into()));
        }
        if (mask.height, mask.width) != (img.height, img.width) {
            return Err(data_err(
                mask_path,
                format!(
                    "mask is {}x{} but image is {}x{}",
                    mask.height, mask.width, img.height, img.width
                ),
            ));
        }
        if let Some(&bad) = mask.values.iter().find(|&&v| v as usize >= classes) {
            return Err(data_err(
                mask_path,
                format!("mask value {bad} is not a class id (K = {classes})"),
            ));
        }
        let maxval = img.maxval as f32;
        out.samples.push(Sample {
            id: stem,
            image: Image {
                channels: img.channels,
                height: img.height,
                width: img.width,
                data: img.to_planar().iter().map(|&v| v as f32 / maxval).collect(),
            },
            mask: Mask {
                height: mask.height,
                width: mask.width,
                data: mask.values.iter().map(|&v| v as u8).collect(),
            },
        });
    }
    if out.samples.is_empty() {
        out.warnings.push(format!("no image/mask pairs found in {}", dir.display()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, channels: usize) -> Sample {
        Sample {
            id: id.into(),
            image: Image {
                channels,
                height: 4,
                width: 6,
                data: (0..channels * 24).map(|i| (i % 256) as f32 / 255.0).collect(),
            },
            mask: Mask {
                height: 4,
                width: 6,
                data: (0..24).map(|i| (i % 2) as u8).collect(),
            },
        }
    }

    #[test]
    fn empty_dir_warns() {
        let dir = tempfile::tempdir().unwrap();
        let l = load_dataset(dir.path(), 2).unwrap();
        assert!(l.samples.is_empty());
        assert_eq!(l.warnings.len(), 1);
    }

    #[test]
    fn saved_pairs_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample("a", 3);
        save_sample(dir.path(), &s).unwrap();
        save_sample(dir.path(), &sample("b", 1)).unwrap();
        let l = load_dataset(dir.path(), 2).unwrap();
        assert_eq!(l.samples.len(), 2);
        assert!(l.warnings.is_empty());
        assert_eq!(l.samples[0], s);
        assert_eq!(l.samples[1].image.channels, 1);
    }

    #[test]
    fn bad_class_id_names_file_and_value() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample("x", 1);
        s.mask.data[3] = 7;
        save_sample(dir.path(), &s).unwrap();
        let err = load_dataset(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("x_mask.pgm") && err.contains('7'), "{err}");
    }

    #[test]
    fn missing_mask_and_orphan_mask() {
        let dir = tempfile::tempdir().unwrap();
        save_sample(dir.path(), &sample("x", 1)).unwrap();
        fs::rename(dir.path().join("x_mask.pgm"), dir.path().join("y_mask.pgm")).unwrap();
        let err = load_dataset(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("x.pgm") && err.contains("missing mask"), "{err}");
        fs::remove_file(dir.path().join("x.pgm")).unwrap();
        let l = load_dataset(dir.path(), 2).unwrap();
        assert_eq!(l.warnings.len(), 2);
    }

    #[test]
    fn unreadable_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("z.pgm"), b"not an image").unwrap();
        fs::write(dir.path().join("z_mask.pgm"), b"P5 1 1 255\n\x00").unwrap();
        let err = load_dataset(dir.path(), 2).unwrap_err().to_string();
        assert!(err.contains("z.pgm"), "{err}");
    }
}
