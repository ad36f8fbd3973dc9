//! Procedural stand-in corpus for runs without the real muzzle images.
//!
//! Each class is a pattern family (horizontal stripes, vertical stripes,
//! checkerboard, concentric rings) at one of three spatial frequencies.
//! All four families map to themselves under a horizontal flip, so the
//! training augmentations never turn one class into another. Individual
//! images vary in phase, frequency, tint, contrast and noise.

use std::f32::consts::PI;
use std::path::Path;

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pixels::PixelTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub images_per_class: usize,
    /// Side of the generated pattern before upscaling.
    pub base_size: u32,
    /// Side of the image written to disk.
    pub output_size: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 12,
            images_per_class: 20,
            base_size: 64,
            output_size: 300,
            seed: 0,
        }
    }
}

const FAMILIES: usize = 4;
const CYCLES: [f32; 3] = [3.0, 6.0, 12.0];

pub const MAX_CLASSES: usize = FAMILIES * CYCLES.len();

/// One sample of class `class` at `size`x`size`.
pub fn pattern(class: usize, size: u32, rng: &mut impl Rng) -> PixelTensor {
    let family = class % FAMILIES;
    let cycles = CYCLES[class / FAMILIES] * rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..2.0 * PI);
    let contrast = rng.random_range(0.25..0.45);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
    let noise = Normal::new(0.0f32, 0.04).expect("finite std");
    let n = size as usize;
    let w = 2.0 * PI * cycles / n as f32;
    PixelTensor::from_fn(n, n, |x, y| {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let s = match family {
            0 => (w * fy + phase).sin(),
            1 => (w * fx + phase).sin(),
            2 => (w * fx + phase).sin() * (w * fy + phase).sin(),
            _ => {
                let c = n as f32 / 2.0;
                (w * ((fx - c).powi(2) + (fy - c).powi(2)).sqrt() + phase).sin()
            }
        };
        let g = noise.sample(rng);
        std::array::from_fn(|ch| (base[ch] + contrast * tint[ch] * s + g).clamp(0.0, 1.0))
    })
}

/// Writes `<root>/class_NN/img_MMM.png` for every class and image.
pub fn write_corpus(root: &Path, spec: &SyntheticSpec) -> Result<()> {
    if spec.classes < 2 || spec.classes > MAX_CLASSES {
        return Err(Error::arg(format!("synthetic corpus supports 2..={MAX_CLASSES} classes, got {}", spec.classes)));
    }
    if spec.images_per_class < 2 || spec.base_size == 0 || spec.output_size == 0 {
        return Err(Error::arg("synthetic corpus needs >= 2 images per class and positive sizes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for class in 0..spec.classes {
        let dir = root.join(format!("class_{class:02}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.images_per_class {
            let small = pattern(class, spec.base_size, &mut rng).to_rgb8();
            let big = image::imageops::resize(&small, spec.output_size, spec.output_size, FilterType::Triangle);
            let path = dir.join(format!("img_{i:03}.png"));
            big.save(&path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            classes: 3,
            images_per_class: 2,
            output_size: 80,
            ..Default::default()
        };
        write_corpus(dir.path(), &spec).unwrap();
        let img = image::open(dir.path().join("class_02/img_001.png")).unwrap();
        assert_eq!((img.width(), img.height()), (80, 80));
        assert!(write_corpus(dir.path(), &SyntheticSpec { classes: 13, ..spec }).is_err());
    }

    #[test]
    fn values_stay_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in [0, 1, 2, 3] {
            let p = pattern(class, 32, &mut rng);
            assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
