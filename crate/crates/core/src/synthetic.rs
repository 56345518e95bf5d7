//! Deterministic synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{CocoCategory, ImageMeta};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub objects_per_image: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Labels are drawn from `1..=n_labels`.
    pub n_labels: u32,
    /// Object side lengths as fractions of the image side.
    pub min_side: f64,
    pub max_side: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 20,
            objects_per_image: 3,
            width: 128,
            height: 128,
            seed: 0,
            n_labels: 3,
            min_side: 0.1,
            max_side: 0.4,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.n_labels == 0 {
            return Err(Error::Config("need at least one label".into()));
        }
        if !(self.min_side > 0.0 && self.min_side <= self.max_side && self.max_side <= 1.0) {
            return Err(Error::Config(format!(
                "object side range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.min_side, self.max_side
            )));
        }
        Ok(())
    }
}

/// Images with ids `"1"..="n"` and objects at integer coordinates. The same
/// config always yields the same dataset.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Vec<ImageMeta>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = |rng: &mut ChaCha8Rng, extent: u32| -> u32 {
        let lo = (cfg.min_side * f64::from(extent)).round().max(1.0) as u32;
        let hi = (cfg.max_side * f64::from(extent)).round().max(f64::from(lo)) as u32;
        rng.gen_range(lo..=hi.min(extent))
    };
    let mut images = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let mut ground_truth = Vec::with_capacity(cfg.objects_per_image);
        for _ in 0..cfg.objects_per_image {
            let w = side(&mut rng, cfg.width);
            let h = side(&mut rng, cfg.height);
            let x = rng.gen_range(0..=cfg.width - w);
            let y = rng.gen_range(0..=cfg.height - h);
            let label = rng.gen_range(1..=cfg.n_labels);
            ground_truth.push(BBox::from_coords(
                f64::from(x),
                f64::from(y),
                f64::from(x + w),
                f64::from(y + h),
                label,
                1.0,
            )?);
        }
        images.push(ImageMeta {
            image_id: (i + 1).to_string(),
            width: cfg.width,
            height: cfg.height,
            ground_truth,
        });
    }
    Ok(images)
}

pub fn categories(cfg: &SyntheticConfig) -> Vec<CocoCategory> {
    (1..=cfg.n_labels)
        .map(|id| CocoCategory {
            id,
            name: format!("class{id}"),
        })
        .collect()
}
