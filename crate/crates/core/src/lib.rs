//! Certified defense against patch hiding attacks on object detectors.
//!
//! The image is masked with a fixed family of half-plane masks, the
//! detector is run on every masked copy, and the masked boxes are pruned
//! against the boxes found on the original image. Because the masks do not
//! depend on the patch, any patch is hidden by some mask, and the detections
//! under that mask bound what the attacker can remove.
//!
//! ```
//! use objectseeker::{generate_mask_set, MaskSetConfig};
//!
//! let set = generate_mask_set(MaskSetConfig::new(2, 9, 9)?)?;
//! assert_eq!(set.len(), 8);
//! # Ok::<(), objectseeker::Error>(())
//! ```

pub mod certification;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod masking;
pub mod metrics;
pub mod pipeline;
pub mod pruning;
pub mod synthetic;

pub use certification::{
    certify_dataset, certify_object, classify_location, enumerate_patches, l_ioa, l_iou,
    simulate_adaptive_attack, BoundKind, CertConfig, CertificationReport, LocationModel,
    PatchRegion, PatchShape, PatchSpec,
};
pub use detector::{
    precompute_store, DetectionStore, DetectionsFixture, Detector, ImageMeta, SyntheticDetector,
    SyntheticDetectorConfig,
};
pub use error::{Error, Result};
pub use geometry::{axis_gap, bounding_union, Axis, BBox, Label, Rect};
pub use masking::{
    generate_mask_set, generate_two_patch_mask_set, CompositeMask, HalfPlaneMask, MaskManifest,
    MaskSet, MaskSetConfig, Side,
};
pub use metrics::{average_precision, match_detections, pr_sweep, MatchConfig, PRPoint};
pub use pipeline::{objectseeker_infer, ThresholdConfig};
pub use pruning::{PruneConfig, ScoreKind};
pub use synthetic::{generate_dataset, SyntheticConfig};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/certification.md")]
    mod certification {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
