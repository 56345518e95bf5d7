//! Robustness certification.
//!
//! For a ground-truth object and a family of patch placements, an object is
//! certified against a placement when some mask that hides the whole patch
//! yields a masked box whose lower bound on the overlap any pruning outcome
//! must keep with the object exceeds the certification threshold `T`. Such a
//! box survives pruning, or is replaced by a box at least as good, whatever
//! the attacker does to the remaining masked detections and the base
//! detections.
//!
//! Two bounds are provided: [`l_ioa`] for IoA robustness with IoA pruning and
//! [`l_iou`] for IoU robustness with the IoU-variant pruning.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectionStore, ImageMeta};
use crate::error::{Error, Result};
use crate::geometry::{axis_gap, Axis, BBox, Label, Rect};
use crate::masking::{CompositeMask, MaskSet};
use crate::pipeline::{infer_from_lists, ThresholdConfig};
use crate::pruning::{split_by_mask_proximity, PruneConfig, ScoreKind};

/// Lower bound on `IoA(b_gt, b_b)` over every box `b_b` with
/// `IoA(b_m, b_b) > tau`: `(|b_m| * tau - |b_m \ b_gt|) / |b_gt|`.
/// Across labels `|b_m \ b_gt| = |b_m|`, so the bound is never positive.
pub fn l_ioa(b_gt: &BBox, b_m: &BBox, tau: f64) -> f64 {
    (b_m.area() * tau - b_m.difference_area(b_gt)) / b_gt.area()
}

/// [`l_ioa`] on bare rectangles (labels ignored).
pub fn l_ioa_rect(gt: &Rect, m: &Rect, tau: f64) -> f64 {
    (m.area() * tau - (m.area() - m.intersection_area(gt))) / gt.area()
}

/// Lower bound on `IoU(b_gt, b_b)` over every box `b_b` with
/// `IoU(b_m, b_b) > tau`.
pub fn l_iou(b_gt: &BBox, b_m: &BBox, tau: f64) -> f64 {
    let inter = b_gt.intersection_area(b_m);
    l_iou_from_parts(b_gt.area() - inter, inter, b_m.area() - inter, tau)
}

/// [`l_iou`] on bare rectangles (labels ignored).
pub fn l_iou_rect(gt: &Rect, m: &Rect, tau: f64) -> f64 {
    let inter = gt.intersection_area(m);
    l_iou_from_parts(gt.area() - inter, inter, m.area() - inter, tau)
}

/// Closed-form optimum of the two-variable LP with `a = |gt \ m|`,
/// `b = |gt ∩ m|`, `c = |m \ gt|`: `max(0, (tau*b + (tau-1)*c) / (a+b+c))`.
pub fn l_iou_from_parts(a: f64, b: f64, c: f64, tau: f64) -> f64 {
    ((tau * b + (tau - 1.0) * c) / (a + b + c)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PatchShape {
    Square,
    /// Width-to-height ratio.
    Rectangle { aspect: f64 },
    /// Fixed size in pixels; `area_fraction` is ignored.
    Explicit { width: u32, height: u32 },
}

/// Threat model geometry: patch shape and size, how many patches, and the
/// placement grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub shape: PatchShape,
    /// Patch pixels over image pixels.
    pub area_fraction: f64,
    pub stride: u32,
    /// 1 or 2 patches.
    #[serde(default = "one")]
    pub count: u8,
}

fn one() -> u8 {
    1
}

impl PatchSpec {
    pub fn square(area_fraction: f64, stride: u32) -> Self {
        Self {
            shape: PatchShape::Square,
            area_fraction,
            stride,
            count: 1,
        }
    }

    pub fn explicit(width: u32, height: u32, stride: u32) -> Self {
        Self {
            shape: PatchShape::Explicit { width, height },
            area_fraction: 0.0,
            stride,
            count: 1,
        }
    }

    pub fn with_count(self, count: u8) -> Self {
        Self { count, ..self }
    }

    /// Patch size in pixels for a `width` x `height` image.
    pub fn patch_size(&self, width: u32, height: u32) -> Result<(u32, u32)> {
        if self.stride == 0 {
            return Err(Error::Config("patch stride must be positive".into()));
        }
        if !(self.count == 1 || self.count == 2) {
            return Err(Error::Config(format!("patch count {} not in {{1, 2}}", self.count)));
        }
        let pixels = f64::from(width) * f64::from(height);
        let check_fraction = || {
            if self.area_fraction > 0.0 && self.area_fraction <= 1.0 {
                Ok(self.area_fraction * pixels)
            } else {
                Err(Error::Config(format!(
                    "patch area fraction {} outside (0, 1]",
                    self.area_fraction
                )))
            }
        };
        let (w, h) = match self.shape {
            PatchShape::Square => {
                let side = check_fraction()?.sqrt().round().max(1.0);
                (side, side)
            }
            PatchShape::Rectangle { aspect } => {
                if !(aspect.is_finite() && aspect > 0.0) {
                    return Err(Error::Config(format!("patch aspect {aspect} must be positive")));
                }
                let area = check_fraction()?;
                ((area * aspect).sqrt().round().max(1.0), (area / aspect).sqrt().round().max(1.0))
            }
            PatchShape::Explicit { width: w, height: h } => (f64::from(w), f64::from(h)),
        };
        if w < 1.0 || h < 1.0 || w > f64::from(width) || h > f64::from(height) {
            return Err(Error::Config(format!(
                "patch {w}x{h} does not fit a {width}x{height} image"
            )));
        }
        Ok((w as u32, h as u32))
    }
}

/// One placement: a single patch or a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchRegion {
    pub first: Rect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<Rect>,
}

impl PatchRegion {
    pub fn single(r: Rect) -> Self {
        Self { first: r, second: None }
    }

    pub fn rects(&self) -> impl Iterator<Item = &Rect> {
        std::iter::once(&self.first).chain(self.second.as_ref())
    }

    /// True iff `mask` hides every patch of the region.
    pub fn covered_by(&self, mask: &CompositeMask) -> bool {
        self.rects().all(|r| mask.covers(r))
    }
}

fn grid_positions(extent: u32, size: u32, stride: u32) -> Vec<u32> {
    let last = extent - size;
    let mut v: Vec<u32> = (0..=last).step_by(stride as usize).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

/// All placements on the stride grid, always including the last row and
/// column so patches touching the right and bottom borders are tested. Two
/// patch placements are all unordered pairs of distinct single placements.
pub fn enumerate_patches(spec: &PatchSpec, width: u32, height: u32) -> Result<Vec<PatchRegion>> {
    let (pw, ph) = spec.patch_size(width, height)?;
    let xs = grid_positions(width, pw, spec.stride);
    let ys = grid_positions(height, ph, spec.stride);
    let mut singles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let r = Rect::from_origin_size(f64::from(x), f64::from(y), f64::from(pw), f64::from(ph))?;
            singles.push(r);
        }
    }
    if spec.count == 1 {
        return Ok(singles.into_iter().map(PatchRegion::single).collect());
    }
    let mut pairs = Vec::with_capacity(singles.len() * singles.len().saturating_sub(1) / 2);
    for (i, a) in singles.iter().enumerate() {
        for b in &singles[i + 1..] {
            pairs.push(PatchRegion {
                first: *a,
                second: Some(*b),
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationModel {
    Far,
    Close,
    Over,
    All,
}

impl LocationModel {
    pub const ALL: [LocationModel; 4] = [
        LocationModel::Far,
        LocationModel::Close,
        LocationModel::Over,
        LocationModel::All,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LocationModel::Far => "far",
            LocationModel::Close => "close",
            LocationModel::Over => "over",
            LocationModel::All => "all",
        }
    }
}

impl fmt::Display for LocationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Over if the patch overlaps the object; far if the gap exceeds 10% of the
/// image extent on both axes; close otherwise.
pub fn classify_location(r: &Rect, o: &Rect, width: u32, height: u32) -> LocationModel {
    if r.intersects(o) {
        LocationModel::Over
    } else if axis_gap(r, o, Axis::X) > 0.1 * f64::from(width)
        && axis_gap(r, o, Axis::Y) > 0.1 * f64::from(height)
    {
        LocationModel::Far
    } else {
        LocationModel::Close
    }
}

/// Multi-patch placements take the worst class among their patches.
pub fn classify_region(region: &PatchRegion, o: &Rect, width: u32, height: u32) -> LocationModel {
    region
        .rects()
        .map(|r| classify_location(r, o, width, height))
        .max_by_key(|m| match m {
            LocationModel::Far => 0,
            LocationModel::Close => 1,
            LocationModel::Over | LocationModel::All => 2,
        })
        .expect("a region has at least one patch")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Ioa,
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertConfig {
    /// Certification threshold `T`.
    pub threshold: f64,
    pub bound: BoundKind,
    /// Require the witness box to carry the object's label.
    pub certify_class: bool,
    /// Share flags between placements that are hidden by the same masks.
    pub use_equivalence_classes: bool,
}

impl Default for CertConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            bound: BoundKind::Ioa,
            certify_class: true,
            use_equivalence_classes: true,
        }
    }
}

impl CertConfig {
    pub fn validate(&self, prune: &PruneConfig) -> Result<()> {
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "certification threshold {} outside [0, 1)",
                self.threshold
            )));
        }
        if self.certify_class && prune.class_agnostic {
            return Err(Error::Config(
                "class-certified robustness needs class-respecting pruning".into(),
            ));
        }
        let expected = match self.bound {
            BoundKind::Ioa => ScoreKind::Ioa,
            BoundKind::Iou => ScoreKind::IouVariant,
        };
        if prune.score != expected {
            return Err(Error::Config(format!(
                "{:?} certification requires {:?} pruning",
                self.bound, expected
            )));
        }
        Ok(())
    }

    /// The overlap score a successful output box must exceed `T` on.
    pub fn score(&self, b_gt: &BBox, b: &BBox) -> f64 {
        match (self.bound, self.certify_class) {
            (BoundKind::Ioa, true) => b_gt.ioa(b),
            (BoundKind::Ioa, false) => b_gt.rect.ioa(&b.rect),
            (BoundKind::Iou, true) => b_gt.iou(b),
            (BoundKind::Iou, false) => b_gt.rect.iou(&b.rect),
        }
    }

    fn bound(&self, b_gt: &BBox, b_m: &BBox, prune: &PruneConfig) -> f64 {
        match (self.bound, self.certify_class) {
            (BoundKind::Ioa, true) => l_ioa(b_gt, b_m, prune.tau),
            (BoundKind::Ioa, false) => l_ioa_rect(&b_gt.rect, &b_m.rect, prune.tau),
            (BoundKind::Iou, true) => l_iou(b_gt, b_m, prune.tau_iou),
            (BoundKind::Iou, false) => l_iou_rect(&b_gt.rect, &b_m.rect, prune.tau_iou),
        }
    }
}

/// A masked box certifying a placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub mask_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub certified: bool,
    /// Placements in this location model.
    pub placements: usize,
    /// For certified models, the per-placement witness with the smallest bound.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weakest_witness: Option<Witness>,
    /// For uncertified models, the first placement without a witness.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<PatchRegion>,
}

impl ModelOutcome {
    fn empty() -> Self {
        Self {
            certified: true,
            placements: 0,
            weakest_witness: None,
            first_failure: None,
        }
    }

    fn record(&mut self, region: &PatchRegion, witness: Option<Witness>) {
        self.placements += 1;
        match witness {
            Some(w) => {
                if self.certified
                    && self.weakest_witness.is_none_or(|cur| w.bound < cur.bound)
                {
                    self.weakest_witness = Some(w);
                }
            }
            None => {
                if self.certified {
                    self.certified = false;
                    self.weakest_witness = None;
                    self.first_failure = Some(*region);
                }
            }
        }
    }
}

/// Certification result for one object under every location model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCertification {
    pub image_id: String,
    pub object_index: usize,
    pub object: BBox,
    /// Object area over image area.
    pub size_fraction: f64,
    pub models: BTreeMap<LocationModel, ModelOutcome>,
}

impl ObjectCertification {
    pub fn certified(&self, model: LocationModel) -> bool {
        self.models.get(&model).is_some_and(|o| o.certified)
    }
}

/// Per-mask strongest witness for `b_gt`, or `None` where no box clears `T`.
fn mask_witnesses(
    b_gt: &BBox,
    image: &ImageMeta,
    store: &DetectionStore,
    mask_set: &MaskSet,
    cert: &CertConfig,
    thresholds: &ThresholdConfig,
    prune: &PruneConfig,
) -> Result<Vec<Option<Witness>>> {
    let dets = store.image(&image.image_id)?;
    let gamma_m = thresholds.gamma_m();
    mask_set
        .masks()
        .iter()
        .map(|mask| {
            let mut eligible = dets.masked_above(mask.id, gamma_m)?;
            if cert.certify_class {
                eligible.retain(|b| b.label == b_gt.label);
            }
            if cert.bound == BoundKind::Iou {
                eligible = split_by_mask_proximity(&eligible, mask, image.width, image.height, prune).0;
            }
            let best = eligible
                .iter()
                .map(|b| Witness {
                    mask_id: mask.id,
                    bbox: *b,
                    bound: cert.bound(b_gt, b, prune),
                })
                .filter(|w| w.bound > cert.threshold)
                .max_by(|a, b| a.bound.total_cmp(&b.bound));
            Ok(best)
        })
        .collect()
}

/// Which masks can hide a region depends only on where its edges fall
/// relative to the cut lines; placements with equal keys share flags.
struct CoverageKey {
    x_cuts: Vec<f64>,
    y_cuts: Vec<f64>,
}

impl CoverageKey {
    fn new(mask_set: &MaskSet) -> Self {
        let cfg = mask_set.config();
        let f = |v: Vec<u32>| v.into_iter().map(f64::from).collect();
        Self {
            x_cuts: f(cfg.cuts(Axis::X)),
            y_cuts: f(cfg.cuts(Axis::Y)),
        }
    }

    fn key(&self, region: &PatchRegion) -> Vec<usize> {
        let below = |cuts: &[f64], v: f64| cuts.partition_point(|&c| c < v);
        let at_or_below = |cuts: &[f64], v: f64| cuts.partition_point(|&c| c <= v);
        region
            .rects()
            .flat_map(|r| {
                [
                    below(&self.x_cuts, r.x_max()),
                    at_or_below(&self.x_cuts, r.x_min()),
                    below(&self.y_cuts, r.y_max()),
                    at_or_below(&self.y_cuts, r.y_min()),
                ]
            })
            .collect()
    }
}

fn best_covering(
    region: &PatchRegion,
    mask_set: &MaskSet,
    witnesses: &[Option<Witness>],
) -> Option<Witness> {
    mask_set
        .masks()
        .iter()
        .zip(witnesses)
        .filter_map(|(m, w)| w.filter(|_| region.covered_by(m)))
        .max_by(|a, b| a.bound.total_cmp(&b.bound).then(b.mask_id.cmp(&a.mask_id)))
}

/// Certify one ground-truth object against every placement of `spec`.
#[allow(clippy::too_many_arguments)]
pub fn certify_object(
    b_gt: &BBox,
    image: &ImageMeta,
    store: &DetectionStore,
    mask_set: &MaskSet,
    spec: &PatchSpec,
    cert: &CertConfig,
    thresholds: &ThresholdConfig,
    prune: &PruneConfig,
) -> Result<BTreeMap<LocationModel, ModelOutcome>> {
    let placements = enumerate_patches(spec, image.width, image.height)?;
    certify_placements(b_gt, image, store, mask_set, &placements, cert, thresholds, prune)
}

#[allow(clippy::too_many_arguments)]
fn certify_placements(
    b_gt: &BBox,
    image: &ImageMeta,
    store: &DetectionStore,
    mask_set: &MaskSet,
    placements: &[PatchRegion],
    cert: &CertConfig,
    thresholds: &ThresholdConfig,
    prune: &PruneConfig,
) -> Result<BTreeMap<LocationModel, ModelOutcome>> {
    cert.validate(prune)?;
    store.check_mask_set(mask_set)?;
    let witnesses = mask_witnesses(b_gt, image, store, mask_set, cert, thresholds, prune)?;
    let mut models: BTreeMap<LocationModel, ModelOutcome> =
        LocationModel::ALL.iter().map(|&m| (m, ModelOutcome::empty())).collect();
    let keyer = CoverageKey::new(mask_set);
    let mut cache: HashMap<Vec<usize>, Option<Witness>> = HashMap::new();
    let any_witness = witnesses.iter().any(Option::is_some);
    for region in placements {
        let witness = if !any_witness {
            None
        } else if cert.use_equivalence_classes {
            *cache
                .entry(keyer.key(region))
                .or_insert_with(|| best_covering(region, mask_set, &witnesses))
        } else {
            best_covering(region, mask_set, &witnesses)
        };
        let class = classify_region(region, &b_gt.rect, image.width, image.height);
        for m in [class, LocationModel::All] {
            models.get_mut(&m).expect("all models present").record(region, witness);
        }
    }
    Ok(models)
}

/// CertR for one location model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertRSummary {
    pub certified: usize,
    pub total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certr: Option<f64>,
}

impl CertRSummary {
    pub fn from_counts(certified: usize, total: usize) -> Self {
        Self {
            certified,
            total,
            certr: (total > 0).then(|| certified as f64 / total as f64),
        }
    }
}

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub mask_manifest_hash: String,
    pub k: u32,
    pub mask_count: usize,
    pub patch: PatchSpec,
    pub cert: CertConfig,
    pub thresholds: ThresholdConfig,
    pub gamma_m: f64,
    pub prune: PruneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub config: ReportConfig,
    pub certr: BTreeMap<LocationModel, CertRSummary>,
    pub objects: Vec<ObjectCertification>,
}

impl CertificationReport {
    pub fn summary(&self, model: LocationModel) -> CertRSummary {
        self.certr
            .get(&model)
            .copied()
            .unwrap_or(CertRSummary::from_counts(0, 0))
    }

    pub fn certr(&self, model: LocationModel) -> Option<f64> {
        self.summary(model).certr
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `model,certified,total,certr`; empty CertR cell when undefined.
    pub fn to_csv(&self) -> String {
        self.to_csv_for(&LocationModel::ALL)
    }

    pub fn to_csv_for(&self, models: &[LocationModel]) -> String {
        let mut out = String::from("model,certified,total,certr\n");
        for &model in models {
            let s = self.summary(model);
            let certr = s.certr.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{model},{},{},{certr}\n", s.certified, s.total));
        }
        out
    }
}

pub fn summarize(objects: &[ObjectCertification]) -> BTreeMap<LocationModel, CertRSummary> {
    LocationModel::ALL
        .iter()
        .map(|&m| {
            let certified = objects.iter().filter(|o| o.certified(m)).count();
            (m, CertRSummary::from_counts(certified, objects.len()))
        })
        .collect()
}

/// Certify every ground-truth object of every image. CertR denominators
/// count all objects, detected in the clean setting or not.
#[allow(clippy::too_many_arguments)]
pub fn certify_dataset(
    images: &[ImageMeta],
    store: &DetectionStore,
    mask_set: &MaskSet,
    spec: &PatchSpec,
    cert: &CertConfig,
    thresholds: &ThresholdConfig,
    prune: &PruneConfig,
) -> Result<CertificationReport> {
    cert.validate(prune)?;
    thresholds.validate()?;
    store.check_mask_set(mask_set)?;
    let cfg = mask_set.config();
    let placements = enumerate_patches(spec, cfg.width, cfg.height)?;
    let jobs: Vec<(&ImageMeta, usize)> = images
        .iter()
        .flat_map(|img| (0..img.ground_truth.len()).map(move |i| (img, i)))
        .collect();
    let objects = jobs
        .par_iter()
        .map(|&(image, index)| {
            let b_gt = &image.ground_truth[index];
            let models = certify_placements(
                b_gt, image, store, mask_set, &placements, cert, thresholds, prune,
            )?;
            Ok(ObjectCertification {
                image_id: image.image_id.clone(),
                object_index: index,
                object: *b_gt,
                size_fraction: b_gt.area() / image.rect().area(),
                models,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CertificationReport {
        config: ReportConfig {
            mask_manifest_hash: mask_set.hash(),
            k: cfg.k,
            mask_count: mask_set.len(),
            patch: *spec,
            cert: *cert,
            thresholds: *thresholds,
            gamma_m: thresholds.gamma_m(),
            prune: *prune,
        },
        certr: summarize(&objects),
        objects,
    })
}

/// Attacker strategies, cycled across trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStrategy {
    /// Random boxes in the base list and every unprotected mask.
    Random,
    /// Base boxes placed to just exceed the filtering threshold against
    /// every clean masked box while staying as far from the object as
    /// possible.
    FilterTriggering,
    /// Base and unprotected masks report nothing.
    EmptyBase,
    /// Base boxes duplicate the clean masked boxes exactly.
    WitnessDuplicates,
}

impl AttackStrategy {
    pub const ALL: [AttackStrategy; 4] = [
        AttackStrategy::Random,
        AttackStrategy::FilterTriggering,
        AttackStrategy::EmptyBase,
        AttackStrategy::WitnessDuplicates,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub trials: usize,
    pub violations: usize,
    pub violations_by_strategy: BTreeMap<AttackStrategy, usize>,
}

/// Adaptive attacker at the detection level. For a placement, the masks
/// hiding the whole patch keep their clean detections; the attacker rewrites
/// the base detections and the detections of every other mask.
pub struct AttackSimulator<'a> {
    image: &'a ImageMeta,
    mask_set: &'a MaskSet,
    base_clean: &'a [BBox],
    masked_clean: &'a [Vec<BBox>],
    thresholds: ThresholdConfig,
    prune: PruneConfig,
    cert: CertConfig,
}

impl<'a> AttackSimulator<'a> {
    pub fn new(
        image: &'a ImageMeta,
        store: &'a DetectionStore,
        mask_set: &'a MaskSet,
        thresholds: ThresholdConfig,
        prune: PruneConfig,
        cert: CertConfig,
    ) -> Result<Self> {
        store.check_mask_set(mask_set)?;
        cert.validate(&prune)?;
        let dets = store.image(&image.image_id)?;
        Ok(Self {
            image,
            mask_set,
            base_clean: &dets.base,
            masked_clean: &dets.masked,
            thresholds,
            prune,
            cert,
        })
    }

    /// Run `trials` seeded attacks on `region` and count outputs in which
    /// some target lacks a box scoring above `T`.
    pub fn run(&self, targets: &[BBox], region: &PatchRegion, trials: usize, seed: u64) -> AttackOutcome {
        let covering: Vec<bool> = self.mask_set.masks().iter().map(|m| region.covered_by(m)).collect();
        let gamma_m = self.thresholds.gamma_m();
        let clean_visible: Vec<BBox> = self
            .masked_clean
            .iter()
            .zip(&covering)
            .filter(|(_, &c)| c)
            .flat_map(|(list, _)| list.iter().filter(|b| b.confidence() > gamma_m).copied())
            .collect();
        let mut labels: Vec<Label> = self.image.ground_truth.iter().map(|b| b.label).collect();
        labels.extend(targets.iter().map(|b| b.label));
        labels.push(Label(labels.iter().map(|l| l.0).max().unwrap_or(0) + 1));
        labels.sort();
        labels.dedup();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut outcome = AttackOutcome {
            trials,
            violations: 0,
            violations_by_strategy: AttackStrategy::ALL.iter().map(|&s| (s, 0)).collect(),
        };
        let mut adversarial: Vec<Vec<BBox>> = vec![Vec::new(); self.mask_set.len()];
        for trial in 0..trials {
            let strategy = AttackStrategy::ALL[trial % AttackStrategy::ALL.len()];
            let base = self.adversarial_base(strategy, &clean_visible, targets, &labels, &mut rng);
            for (id, list) in adversarial.iter_mut().enumerate() {
                list.clear();
                if covering[id] {
                    continue;
                }
                // Extra masked boxes can only add candidates, so a sparse
                // sprinkle exercises clustering without slowing trials down.
                if strategy != AttackStrategy::EmptyBase && rng.gen_bool(0.1) {
                    list.push(self.random_box(&labels, &mut rng));
                }
            }
            let masked = self.mask_set.masks().iter().enumerate().map(|(id, m)| {
                let list = if covering[id] {
                    self.masked_clean[id].as_slice()
                } else {
                    adversarial[id].as_slice()
                };
                (m, list)
            });
            let out = infer_from_lists(
                self.image.width,
                self.image.height,
                &base,
                masked,
                &self.thresholds,
                &self.prune,
            );
            let ok = targets.iter().all(|gt| {
                out.iter().any(|b| self.cert.score(gt, b) > self.cert.threshold)
            });
            if !ok {
                outcome.violations += 1;
                *outcome.violations_by_strategy.entry(strategy).or_default() += 1;
            }
        }
        outcome
    }

    fn adversarial_base(
        &self,
        strategy: AttackStrategy,
        clean_visible: &[BBox],
        targets: &[BBox],
        labels: &[Label],
        rng: &mut ChaCha8Rng,
    ) -> Vec<BBox> {
        let confident = |b: BBox| b.with_confidence(1.0).expect("1 is a valid confidence");
        match strategy {
            AttackStrategy::EmptyBase => Vec::new(),
            AttackStrategy::Random => {
                let n = rng.gen_range(0..=4);
                let mut v: Vec<BBox> = (0..n).map(|_| self.random_box(labels, rng)).collect();
                // Occasionally echo the clean base so filtering is exercised.
                if rng.gen_bool(0.5) {
                    v.extend(self.base_clean.iter().copied());
                }
                v
            }
            AttackStrategy::WitnessDuplicates => {
                clean_visible.iter().copied().map(confident).collect()
            }
            AttackStrategy::FilterTriggering => {
                let (tau, use_iou) = match self.prune.score {
                    ScoreKind::Ioa => (self.prune.tau, false),
                    ScoreKind::IouVariant => (self.prune.tau_iou, true),
                };
                let mut v = Vec::with_capacity(clean_visible.len());
                for b in clean_visible {
                    let away_from = targets
                        .iter()
                        .filter(|t| t.label == b.label)
                        .max_by(|p, q| p.ioa(b).total_cmp(&q.ioa(b)))
                        .map_or(b.rect, |t| t.rect);
                    let evasive = if use_iou {
                        iou_evasive_box(&b.rect, &away_from, tau)
                    } else {
                        ioa_evasive_box(&b.rect, &away_from, tau, rng.gen_bool(0.5))
                    };
                    if let Ok(e) = BBox::new(evasive, b.label, 1.0) {
                        v.push(e);
                    }
                }
                v.shuffle(rng);
                v
            }
        }
    }

    fn random_box(&self, labels: &[Label], rng: &mut ChaCha8Rng) -> BBox {
        let w = f64::from(self.image.width);
        let h = f64::from(self.image.height);
        let x0 = rng.gen_range(0.0..w - 1.0);
        let y0 = rng.gen_range(0.0..h - 1.0);
        let x1 = rng.gen_range(x0 + 1.0..=w);
        let y1 = rng.gen_range(y0 + 1.0..=h);
        let label = *labels.choose(rng).expect("label pool is nonempty");
        BBox::new(
            Rect::new(x0, y0, x1, y1).expect("positive extent"),
            label,
            rng.gen_range(0.0..=1.0),
        )
        .expect("valid random box")
    }
}

/// A box whose IoA with `m` just exceeds `tau`, pushed away from `target`:
/// either `m` translated or the far slice of `m`.
fn ioa_evasive_box(m: &Rect, target: &Rect, tau: f64, translate: bool) -> Rect {
    let keep = tau + (1.0 - tau) * 1e-6;
    let (mx, my) = (m.x_min() + m.x_max(), m.y_min() + m.y_max());
    let (tx, ty) = (target.x_min() + target.x_max(), target.y_min() + target.y_max());
    let along_x = (mx - tx).abs() * m.height() >= (my - ty).abs() * m.width();
    let positive = if along_x { mx >= tx } else { my >= ty };
    let [x0, y0, x1, y1] = m.coords();
    let (w, h) = (m.width(), m.height());
    let out = match (along_x, positive, translate) {
        (true, true, true) => [x0 + (1.0 - keep) * w, y0, x1 + (1.0 - keep) * w, y1],
        (true, false, true) => [x0 - (1.0 - keep) * w, y0, x1 - (1.0 - keep) * w, y1],
        (false, true, true) => [x0, y0 + (1.0 - keep) * h, x1, y1 + (1.0 - keep) * h],
        (false, false, true) => [x0, y0 - (1.0 - keep) * h, x1, y1 - (1.0 - keep) * h],
        (true, true, false) => [x1 - keep * w, y0, x1, y1],
        (true, false, false) => [x0, y0, x0 + keep * w, y1],
        (false, true, false) => [x0, y1 - keep * h, x1, y1],
        (false, false, false) => [x0, y0, x1, y0 + keep * h],
    };
    Rect::new(out[0], out[1], out[2], out[3]).unwrap_or(*m)
}

/// A box whose IoU with `m` just exceeds `tau`: `m` shrunk from the side
/// facing `target`.
fn iou_evasive_box(m: &Rect, target: &Rect, tau: f64) -> Rect {
    let keep = tau + (1.0 - tau) * 1e-6;
    let [x0, y0, x1, y1] = m.coords();
    let w = m.width();
    let towards_left = target.x_min() + target.x_max() < x0 + x1;
    let shrunk = if towards_left {
        [x1 - keep * w, y0, x1, y1]
    } else {
        [x0, y0, x0 + keep * w, y1]
    };
    Rect::new(shrunk[0], shrunk[1], shrunk[2], shrunk[3]).unwrap_or(*m)
}

/// Seeded adaptive attacks against one object at one placement; returns
/// the number of trials whose output lacks a box scoring above `T`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_adaptive_attack(
    b_gt: &BBox,
    image: &ImageMeta,
    store: &DetectionStore,
    mask_set: &MaskSet,
    region: &PatchRegion,
    thresholds: &ThresholdConfig,
    prune: &PruneConfig,
    cert: &CertConfig,
    trials: usize,
    seed: u64,
) -> Result<AttackOutcome> {
    let sim = AttackSimulator::new(image, store, mask_set, *thresholds, *prune, *cert)?;
    Ok(sim.run(std::slice::from_ref(b_gt), region, trials, seed))
}

/// Attack-suite totals over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSuiteReport {
    pub trials_per_class: usize,
    /// Certified (object, placement) pairs exercised.
    pub certified_pairs: usize,
    /// Placement classes with identical covering masks; one seeded run each.
    pub classes_attacked: usize,
    pub trials: usize,
    pub violations: usize,
    pub violations_by_strategy: BTreeMap<AttackStrategy, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<AttackFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackFailure {
    pub image_id: String,
    pub region: PatchRegion,
    pub violations: usize,
}

/// Attack every certified (object, placement) pair of every image.
/// Placements hidden by the same masks pose the same attack problem, so
/// each such class is attacked once with all of its certified objects as
/// targets; the seed is derived from `seed`, the image and the class.
#[allow(clippy::too_many_arguments)]
pub fn attack_suite(
    images: &[ImageMeta],
    store: &DetectionStore,
    mask_set: &MaskSet,
    spec: &PatchSpec,
    cert: &CertConfig,
    thresholds: &ThresholdConfig,
    prune: &PruneConfig,
    trials: usize,
    seed: u64,
) -> Result<AttackSuiteReport> {
    cert.validate(prune)?;
    store.check_mask_set(mask_set)?;
    let cfg = mask_set.config();
    let placements = enumerate_patches(spec, cfg.width, cfg.height)?;
    let keyer = CoverageKey::new(mask_set);
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(img_idx, image)| {
            let witnesses = image
                .ground_truth
                .iter()
                .map(|gt| mask_witnesses(gt, image, store, mask_set, cert, thresholds, prune))
                .collect::<Result<Vec<_>>>()?;
            let mut classes: Vec<(PatchRegion, usize)> = Vec::new();
            let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
            for region in &placements {
                let slot = *index.entry(keyer.key(region)).or_insert_with(|| {
                    classes.push((*region, 0));
                    classes.len() - 1
                });
                classes[slot].1 += 1;
            }
            let sim = AttackSimulator::new(image, store, mask_set, *thresholds, *prune, *cert)?;
            let mut out = AttackSuiteReport {
                trials_per_class: trials,
                certified_pairs: 0,
                classes_attacked: 0,
                trials: 0,
                violations: 0,
                violations_by_strategy: BTreeMap::new(),
                failures: Vec::new(),
            };
            for (class_idx, (region, size)) in classes.iter().enumerate() {
                let targets: Vec<BBox> = image
                    .ground_truth
                    .iter()
                    .zip(&witnesses)
                    .filter(|(_, w)| best_covering(region, mask_set, w).is_some())
                    .map(|(gt, _)| *gt)
                    .collect();
                if targets.is_empty() {
                    continue;
                }
                let class_seed = seed
                    ^ (img_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    ^ (class_idx as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
                let o = sim.run(&targets, region, trials, class_seed);
                out.certified_pairs += targets.len() * size;
                out.classes_attacked += 1;
                out.trials += o.trials;
                out.violations += o.violations;
                for (s, n) in o.violations_by_strategy {
                    *out.violations_by_strategy.entry(s).or_default() += n;
                }
                if o.violations > 0 {
                    out.failures.push(AttackFailure {
                        image_id: image.image_id.clone(),
                        region: *region,
                        violations: o.violations,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = AttackSuiteReport {
        trials_per_class: trials,
        certified_pairs: 0,
        classes_attacked: 0,
        trials: 0,
        violations: 0,
        violations_by_strategy: AttackStrategy::ALL.iter().map(|&s| (s, 0)).collect(),
        failures: Vec::new(),
    };
    for r in per_image {
        total.certified_pairs += r.certified_pairs;
        total.classes_attacked += r.classes_attacked;
        total.trials += r.trials;
        total.violations += r.violations;
        for (s, n) in r.violations_by_strategy {
            *total.violations_by_strategy.entry(s).or_default() += n;
        }
        total.failures.extend(r.failures);
    }
    Ok(total)
}
