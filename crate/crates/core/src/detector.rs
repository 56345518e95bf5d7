//! Vanilla detector abstraction, the synthetic and replay backends, and the
//! per-image detection store shared by inference and certification.
//!
//! Detections are computed once per (image, mask) with the confidence floor
//! at zero; every threshold is applied when the store is queried.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError, Label, Rect};
use crate::masking::{CompositeMask, MaskSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("unknown mask id {0}")]
    UnknownMask(usize),
    #[error("fixture is pinned to mask manifest {found}, active manifest is {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("image `{image}`: missing detection list `{key}`")]
    MissingKey { image: String, key: String },
    #[error("image `{image}`: unexpected detection key `{key}`")]
    UnexpectedKey { image: String, key: String },
    #[error("image `{image}`: ground-truth box {index} lies outside the {width}x{height} image")]
    GroundTruthOutOfBounds {
        image: String,
        index: usize,
        width: u32,
        height: u32,
    },
    #[error("image `{image}` is {width}x{height} but the mask set expects {mask_width}x{mask_height}")]
    SizeMismatch {
        image: String,
        width: u32,
        height: u32,
        mask_width: u32,
        mask_height: u32,
    },
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("{context}: {source}")]
    Geometry {
        context: String,
        source: GeometryError,
    },
    #[error("schema: {0}")]
    Schema(String),
}

/// Image metadata; pixels are never materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub ground_truth: Vec<BBox>,
}

impl ImageMeta {
    pub fn rect(&self) -> Rect {
        Rect::new(0.0, 0.0, f64::from(self.width), f64::from(self.height))
            .expect("image size is positive")
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.width == 0 || self.height == 0 {
            return Err(DetectorError::Schema(format!(
                "image `{}` has zero size",
                self.image_id
            )));
        }
        let bounds = self.rect();
        for (index, b) in self.ground_truth.iter().enumerate() {
            if !bounds.contains(&b.rect) {
                return Err(DetectorError::GroundTruthOutOfBounds {
                    image: self.image_id.clone(),
                    index,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }
}

/// Key of one detection list within an image: the unmasked image or a mask id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MaskKey {
    Base,
    Mask(usize),
}

impl MaskKey {
    pub fn wire_name(&self) -> String {
        match self {
            MaskKey::Base => "base".to_string(),
            MaskKey::Mask(id) => id.to_string(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "base" {
            return Some(MaskKey::Base);
        }
        // Reject "+1", "01" and friends so keys round-trip exactly.
        let id: usize = s.parse().ok()?;
        (id.to_string() == s).then_some(MaskKey::Mask(id))
    }
}

/// A vanilla detector `F(x ⊙ m, γ)`: returns boxes with confidence strictly
/// above `gamma`.
pub trait Detector: Sync {
    fn detect(
        &self,
        image: &ImageMeta,
        mask: Option<&CompositeMask>,
        gamma: f64,
    ) -> Result<Vec<BBox>, DetectorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDetectorConfig {
    /// Minimum visible fraction for an object to be detected.
    pub visibility_threshold: f64,
}

impl Default for SyntheticDetectorConfig {
    fn default() -> Self {
        Self {
            visibility_threshold: 0.3,
        }
    }
}

/// Geometric stand-in for a trained model: each ground-truth object whose
/// visible fraction reaches the visibility threshold is reported as the
/// bounding box of its visible part, with the visible fraction as confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDetector {
    config: SyntheticDetectorConfig,
}

impl SyntheticDetector {
    pub fn new(config: SyntheticDetectorConfig) -> Result<Self, DetectorError> {
        let v = config.visibility_threshold;
        if !(v > 0.0 && v <= 1.0) {
            return Err(DetectorError::Threshold(v));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> SyntheticDetectorConfig {
        self.config
    }
}

impl Detector for SyntheticDetector {
    fn detect(
        &self,
        image: &ImageMeta,
        mask: Option<&CompositeMask>,
        gamma: f64,
    ) -> Result<Vec<BBox>, DetectorError> {
        check_threshold(gamma)?;
        let mut out = Vec::new();
        for gt in &image.ground_truth {
            let (region, fraction) = match mask {
                None => (Some(gt.rect), 1.0),
                Some(m) => (m.visible_region(&gt.rect), m.visible_fraction(&gt.rect)),
            };
            let Some(region) = region else { continue };
            if fraction >= self.config.visibility_threshold && fraction > gamma {
                let b = BBox::new(region, gt.label, fraction.min(1.0)).map_err(|source| {
                    DetectorError::Geometry {
                        context: format!("synthetic detection on `{}`", image.image_id),
                        source,
                    }
                })?;
                out.push(b);
            }
        }
        Ok(out)
    }
}

fn check_threshold(gamma: f64) -> Result<(), DetectorError> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(DetectorError::Threshold(gamma))
    }
}

/// Detections for one image at confidence floor 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageDetections {
    pub base: Vec<BBox>,
    /// Indexed by mask id.
    pub masked: Vec<Vec<BBox>>,
}

impl ImageDetections {
    pub fn base_above(&self, gamma: f64) -> Vec<BBox> {
        above(&self.base, gamma)
    }

    pub fn masked_above(&self, mask_id: usize, gamma: f64) -> Result<Vec<BBox>, DetectorError> {
        self.masked
            .get(mask_id)
            .map(|list| above(list, gamma))
            .ok_or(DetectorError::UnknownMask(mask_id))
    }

    pub fn list(&self, key: MaskKey) -> Option<&[BBox]> {
        match key {
            MaskKey::Base => Some(&self.base),
            MaskKey::Mask(id) => self.masked.get(id).map(Vec::as_slice),
        }
    }
}

fn above(list: &[BBox], gamma: f64) -> Vec<BBox> {
    list.iter().filter(|b| b.confidence() > gamma).copied().collect()
}

/// Write-once store of base and masked detections for a dataset, pinned to
/// one mask set by its manifest hash.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStore {
    mask_manifest_hash: String,
    mask_count: usize,
    images: BTreeMap<String, ImageDetections>,
}

impl DetectionStore {
    pub fn new(mask_set: &MaskSet) -> Self {
        Self {
            mask_manifest_hash: mask_set.hash(),
            mask_count: mask_set.len(),
            images: BTreeMap::new(),
        }
    }

    pub fn mask_manifest_hash(&self) -> &str {
        &self.mask_manifest_hash
    }

    pub fn mask_count(&self) -> usize {
        self.mask_count
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    pub fn image(&self, image_id: &str) -> Result<&ImageDetections, DetectorError> {
        self.images
            .get(image_id)
            .ok_or_else(|| DetectorError::UnknownImage(image_id.to_string()))
    }

    /// Insert one image's detections; the masked list count must match the
    /// mask set.
    pub fn insert(&mut self, image_id: String, dets: ImageDetections) -> Result<(), DetectorError> {
        if dets.masked.len() != self.mask_count {
            return Err(DetectorError::MissingKey {
                image: image_id,
                key: format!("{} masked lists expected, got {}", self.mask_count, dets.masked.len()),
            });
        }
        self.images.insert(image_id, dets);
        Ok(())
    }

    /// Checks that the store was built for `mask_set`.
    pub fn check_mask_set(&self, mask_set: &MaskSet) -> Result<(), DetectorError> {
        let expected = mask_set.hash();
        if expected != self.mask_manifest_hash {
            return Err(DetectorError::HashMismatch {
                expected,
                found: self.mask_manifest_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn to_fixture(&self) -> DetectionsFixture {
        DetectionsFixture {
            mask_manifest_hash: self.mask_manifest_hash.clone(),
            images: self.images.clone(),
        }
    }

    /// Validate a replayed fixture against the active mask set and dataset.
    /// Boxes reaching outside the image are clamped to it; boxes left with
    /// no area are dropped. Both are reported as warnings.
    pub fn from_fixture(
        fixture: DetectionsFixture,
        images: &[ImageMeta],
        mask_set: &MaskSet,
    ) -> Result<FixtureLoad, DetectorError> {
        let expected = mask_set.hash();
        if fixture.mask_manifest_hash != expected {
            return Err(DetectorError::HashMismatch {
                expected,
                found: fixture.mask_manifest_hash,
            });
        }
        let mut fixture_images = fixture.images;
        let mut store = DetectionStore::new(mask_set);
        let mut warnings = Vec::new();
        for meta in images {
            let mut dets = fixture_images
                .remove(&meta.image_id)
                .ok_or_else(|| DetectorError::MissingKey {
                    image: meta.image_id.clone(),
                    key: "<image entry>".to_string(),
                })?;
            if dets.masked.len() != mask_set.len() {
                return Err(DetectorError::MissingKey {
                    image: meta.image_id.clone(),
                    key: dets.masked.len().to_string(),
                });
            }
            let bounds = meta.rect();
            let mut clamp = |list: &mut Vec<BBox>, key: MaskKey| {
                list.retain_mut(|b| {
                    if bounds.contains(&b.rect) {
                        return true;
                    }
                    match b.rect.clamp_to(&bounds) {
                        Some(r) => {
                            warnings.push(format!(
                                "image `{}` list `{}`: box {:?} clamped to image bounds",
                                meta.image_id,
                                key.wire_name(),
                                b.rect.coords()
                            ));
                            b.rect = r;
                            true
                        }
                        None => {
                            warnings.push(format!(
                                "image `{}` list `{}`: box {:?} outside the image dropped",
                                meta.image_id,
                                key.wire_name(),
                                b.rect.coords()
                            ));
                            false
                        }
                    }
                });
            };
            clamp(&mut dets.base, MaskKey::Base);
            for (id, list) in dets.masked.iter_mut().enumerate() {
                clamp(list, MaskKey::Mask(id));
            }
            store.images.insert(meta.image_id.clone(), dets);
        }
        if let Some(extra) = fixture_images.keys().next() {
            warnings.push(format!(
                "fixture holds {} image(s) absent from the annotations, e.g. `{extra}`; ignored",
                fixture_images.len()
            ));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(FixtureLoad { store, warnings })
    }
}

pub struct FixtureLoad {
    pub store: DetectionStore,
    pub warnings: Vec<String>,
}

/// Run `backend` on the base image and every mask of `mask_set` for each
/// image, at confidence floor 0.
pub fn precompute_store<D: Detector>(
    backend: &D,
    images: &[ImageMeta],
    mask_set: &MaskSet,
) -> Result<DetectionStore, DetectorError> {
    let cfg = mask_set.config();
    let entries = images
        .par_iter()
        .map(|image| {
            image.validate()?;
            if image.width != cfg.width || image.height != cfg.height {
                return Err(DetectorError::SizeMismatch {
                    image: image.image_id.clone(),
                    width: image.width,
                    height: image.height,
                    mask_width: cfg.width,
                    mask_height: cfg.height,
                });
            }
            let base = backend.detect(image, None, 0.0)?;
            let masked = mask_set
                .masks()
                .par_iter()
                .map(|m| backend.detect(image, Some(m), 0.0))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((image.image_id.clone(), ImageDetections { base, masked }))
        })
        .collect::<Result<Vec<_>, DetectorError>>()?;
    let mut store = DetectionStore::new(mask_set);
    for (id, dets) in entries {
        store.insert(id, dets)?;
    }
    Ok(store)
}

/// Replays a store as a detector.
pub struct FixtureDetector<'a> {
    store: &'a DetectionStore,
}

impl<'a> FixtureDetector<'a> {
    pub fn new(store: &'a DetectionStore) -> Self {
        Self { store }
    }
}

impl Detector for FixtureDetector<'_> {
    fn detect(
        &self,
        image: &ImageMeta,
        mask: Option<&CompositeMask>,
        gamma: f64,
    ) -> Result<Vec<BBox>, DetectorError> {
        check_threshold(gamma)?;
        let dets = self.store.image(&image.image_id)?;
        match mask {
            None => Ok(dets.base_above(gamma)),
            Some(m) => dets.masked_above(m.id, gamma),
        }
    }
}

/// `[x_min, y_min, x_max, y_max, label, confidence]`.
pub type WireBox = (f64, f64, f64, f64, u32, f64);

pub fn to_wire(b: &BBox) -> WireBox {
    let [x0, y0, x1, y1] = b.rect.coords();
    (x0, y0, x1, y1, b.label.0, b.confidence())
}

pub fn from_wire(w: &WireBox) -> Result<BBox, GeometryError> {
    BBox::new(Rect::new(w.0, w.1, w.2, w.3)?, Label(w.4), w.5)
}

/// Wire form of a [`DetectionStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionsFixture {
    pub mask_manifest_hash: String,
    pub images: BTreeMap<String, ImageDetections>,
}

impl DetectionsFixture {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&FixtureRef(self)).expect("fixture serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, DetectorError> {
        let raw: RawFixture =
            serde_json::from_str(s).map_err(|e| DetectorError::Schema(e.to_string()))?;
        let mut images = BTreeMap::new();
        for (image_id, lists) in raw.images {
            let mut base = None;
            let mut masked: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
            for (key, wire) in lists {
                let parsed = MaskKey::parse(&key).ok_or_else(|| DetectorError::UnexpectedKey {
                    image: image_id.clone(),
                    key: key.clone(),
                })?;
                let boxes = wire
                    .iter()
                    .enumerate()
                    .map(|(i, w)| {
                        from_wire(w).map_err(|source| DetectorError::Geometry {
                            context: format!("image `{image_id}` list `{key}` box {i}"),
                            source,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                match parsed {
                    MaskKey::Base => base = Some(boxes),
                    MaskKey::Mask(id) => {
                        masked.insert(id, boxes);
                    }
                }
            }
            let base = base.ok_or_else(|| DetectorError::MissingKey {
                image: image_id.clone(),
                key: "base".to_string(),
            })?;
            let n = masked.len();
            if let Some(missing) = (0..n).find(|id| !masked.contains_key(id)) {
                return Err(DetectorError::MissingKey {
                    image: image_id,
                    key: missing.to_string(),
                });
            }
            images.insert(
                image_id,
                ImageDetections {
                    base,
                    masked: masked.into_values().collect(),
                },
            );
        }
        Ok(Self {
            mask_manifest_hash: raw.mask_manifest_hash,
            images,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFixture {
    mask_manifest_hash: String,
    images: BTreeMap<String, BTreeMap<String, Vec<WireBox>>>,
}

struct FixtureRef<'a>(&'a DetectionsFixture);

struct ImageRef<'a>(&'a ImageDetections);

struct WireList<'a>(&'a [BBox]);

impl Serialize for FixtureRef<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let images: BTreeMap<&str, ImageRef<'_>> = self
            .0
            .images
            .iter()
            .map(|(k, v)| (k.as_str(), ImageRef(v)))
            .collect();
        let mut map = s.serialize_map(Some(2))?;
        map.serialize_entry("mask_manifest_hash", &self.0.mask_manifest_hash)?;
        map.serialize_entry("images", &images)?;
        map.end()
    }
}

impl Serialize for ImageRef<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(1 + self.0.masked.len()))?;
        map.serialize_entry("base", &WireList(&self.0.base))?;
        for (id, list) in self.0.masked.iter().enumerate() {
            map.serialize_entry(&id.to_string(), &WireList(list))?;
        }
        map.end()
    }
}

impl Serialize for WireList<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(to_wire))
    }
}

/// COCO-style annotation file (the subset used here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub category_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

impl CocoDataset {
    pub fn from_json(s: &str) -> Result<Self, DetectorError> {
        serde_json::from_str(s).map_err(|e| DetectorError::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("annotations serialize");
        s.push('\n');
        s
    }

    /// Image metadata in file order; ground-truth boxes keep annotation order.
    pub fn to_images(&self) -> Result<Vec<ImageMeta>, DetectorError> {
        let mut by_id: BTreeMap<u64, usize> = BTreeMap::new();
        let mut images: Vec<ImageMeta> = Vec::with_capacity(self.images.len());
        for img in &self.images {
            if by_id.insert(img.id, images.len()).is_some() {
                return Err(DetectorError::Schema(format!("duplicate image id {}", img.id)));
            }
            images.push(ImageMeta {
                image_id: img.id.to_string(),
                width: img.width,
                height: img.height,
                ground_truth: Vec::new(),
            });
        }
        for (i, ann) in self.annotations.iter().enumerate() {
            let &slot = by_id.get(&ann.image_id).ok_or_else(|| {
                DetectorError::Schema(format!(
                    "annotations[{i}].image_id: unknown image {}",
                    ann.image_id
                ))
            })?;
            let [x, y, w, h] = ann.bbox;
            let b = BBox::from_coords(x, y, x + w, y + h, ann.category_id, 1.0).map_err(
                |source| DetectorError::Geometry {
                    context: format!("annotations[{i}].bbox"),
                    source,
                },
            )?;
            images[slot].ground_truth.push(b);
        }
        for img in &images {
            img.validate()?;
        }
        Ok(images)
    }

    pub fn from_images(images: &[ImageMeta], categories: Vec<CocoCategory>) -> Result<Self, DetectorError> {
        let mut coco_images = Vec::with_capacity(images.len());
        let mut annotations = Vec::new();
        for img in images {
            let id: u64 = img.image_id.parse().map_err(|_| {
                DetectorError::Schema(format!("image id `{}` is not an integer", img.image_id))
            })?;
            coco_images.push(CocoImage {
                id,
                width: img.width,
                height: img.height,
                file_name: None,
            });
            for gt in &img.ground_truth {
                let r = gt.rect;
                annotations.push(CocoAnnotation {
                    id: Some(annotations.len() as u64 + 1),
                    image_id: id,
                    bbox: [r.x_min(), r.y_min(), r.width(), r.height()],
                    category_id: gt.label.0,
                });
            }
        }
        Ok(Self {
            images: coco_images,
            annotations,
            categories,
        })
    }
}
