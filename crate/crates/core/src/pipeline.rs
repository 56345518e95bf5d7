//! End-to-end robust inference over a detection store.

use serde::{Deserialize, Serialize};

use crate::detector::{DetectionStore, ImageMeta};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::masking::{CompositeMask, MaskSet};
use crate::pruning::{
    ioa_box_prune, iou_box_prune, split_by_mask_proximity, PruneConfig, ScoreKind,
};

/// Base and masked confidence thresholds. The masked threshold is coupled to
/// the base one: `gamma_m = max(alpha, gamma_b + (1 - gamma_b) * beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub gamma_b: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            gamma_b: 0.0,
            alpha: 0.8,
            beta: 0.8,
        }
    }
}

impl ThresholdConfig {
    pub fn new(gamma_b: f64, alpha: f64, beta: f64) -> Result<Self> {
        let t = Self { gamma_b, alpha, beta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma_b", self.gamma_b), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn gamma_m(&self) -> f64 {
        coupled_gamma_m(self)
    }

    pub fn with_gamma_b(self, gamma_b: f64) -> Self {
        Self { gamma_b, ..self }
    }
}

pub fn coupled_gamma_m(t: &ThresholdConfig) -> f64 {
    t.alpha.max(t.gamma_b + (1.0 - t.gamma_b) * t.beta)
}

/// Robust inference for one image from its precomputed detections.
pub fn objectseeker_infer(
    image: &ImageMeta,
    store: &DetectionStore,
    mask_set: &MaskSet,
    thresholds: &ThresholdConfig,
    prune: &PruneConfig,
) -> Result<Vec<BBox>> {
    store.check_mask_set(mask_set)?;
    let dets = store.image(&image.image_id)?;
    Ok(infer_from_lists(
        image.width,
        image.height,
        &dets.base,
        mask_set.masks().iter().zip(dets.masked.iter().map(Vec::as_slice)),
        thresholds,
        prune,
    ))
}

/// Robust inference from raw detection lists (confidence floor 0); the
/// thresholds are applied here. Used directly by the attack simulator, which
/// substitutes adversarial lists for some masks.
pub fn infer_from_lists<'a, I>(
    width: u32,
    height: u32,
    base: &[BBox],
    masked: I,
    thresholds: &ThresholdConfig,
    prune: &PruneConfig,
) -> Vec<BBox>
where
    I: IntoIterator<Item = (&'a CompositeMask, &'a [BBox])>,
{
    let gamma_b = thresholds.gamma_b;
    let gamma_m = thresholds.gamma_m();
    let base: Vec<BBox> = base.iter().filter(|b| b.confidence() > gamma_b).copied().collect();
    // Exact duplicates always share a cluster and an NMS seed, so merging them
    // first is output-preserving as long as every point is a DBSCAN core point.
    let merge_inputs = prune.dbscan_min_points <= 1;
    let out = match prune.score {
        ScoreKind::Ioa => {
            let mut pooled: Vec<BBox> = masked
                .into_iter()
                .flat_map(|(_, list)| list.iter().filter(|b| b.confidence() > gamma_m).copied())
                .collect();
            if merge_inputs {
                pooled = merge_duplicates(pooled);
            }
            ioa_box_prune(&pooled, &base, prune)
        }
        ScoreKind::IouVariant => {
            let mut far = Vec::new();
            let mut near = Vec::new();
            for (mask, list) in masked {
                let kept: Vec<BBox> =
                    list.iter().filter(|b| b.confidence() > gamma_m).copied().collect();
                let (no, o) = split_by_mask_proximity(&kept, mask, width, height, prune);
                far.extend(no);
                near.extend(o);
            }
            far = merge_duplicates(far);
            if merge_inputs {
                near = merge_duplicates(near);
            }
            iou_box_prune(&far, &near, &base, prune)
        }
    };
    canonicalize(out)
}

/// Merge boxes with identical geometry and label, keeping the highest
/// confidence; result sorted by geometry.
pub fn merge_duplicates(mut boxes: Vec<BBox>) -> Vec<BBox> {
    boxes.sort_by(|a, b| a.geometry_cmp(b).then(b.confidence().total_cmp(&a.confidence())));
    boxes.dedup_by(|later, kept| later.same_geometry(kept));
    boxes
}

/// De-duplicated output in rank order (confidence descending).
pub fn canonicalize(boxes: Vec<BBox>) -> Vec<BBox> {
    let mut out = merge_duplicates(boxes);
    out.sort_by(BBox::rank_cmp);
    out
}
