//! Secure box pruning.
//!
//! Masked boxes that duplicate a base box are filtered out; the survivors are
//! clustered and each cluster is replaced by one representative. The IoA
//! instantiation clusters with DBSCAN and represents a cluster by its
//! enclosing box. The IoU variant additionally splits masked boxes by their
//! distance to the mask that produced them and suppresses the far group with
//! greedy NMS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bounding_union, bounding_union_any_label, BBox};
use crate::masking::CompositeMask;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PruneError {
    #[error("{name} = {value} must lie in {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// Similarity is IoA throughout.
    Ioa,
    /// IoU for boxes far from their mask, IoA for the rest.
    IouVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub score: ScoreKind,
    /// IoA filtering threshold.
    pub tau: f64,
    /// IoU threshold for the non-overlapping branch of the IoU variant.
    pub tau_iou: f64,
    /// IoA threshold for the overlapping branch of the IoU variant.
    pub tau_ioa: f64,
    pub dbscan_eps: f64,
    /// Neighbours (the point itself included) needed for a core point.
    pub dbscan_min_points: usize,
    /// Compare boxes regardless of their labels.
    pub class_agnostic: bool,
    /// Fraction of the image extent a box must keep from its mask to count
    /// as non-overlapping.
    pub nonoverlap_margin: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            score: ScoreKind::Ioa,
            tau: 0.6,
            tau_iou: 0.8,
            tau_ioa: 0.6,
            dbscan_eps: 0.1,
            dbscan_min_points: 1,
            class_agnostic: false,
            nonoverlap_margin: 0.05,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        let unit = |name, value: f64| {
            if value > 0.0 && value <= 1.0 {
                Ok(())
            } else {
                Err(PruneError::OutOfRange {
                    name,
                    value,
                    range: "(0, 1]",
                })
            }
        };
        unit("tau", self.tau)?;
        unit("tau_iou", self.tau_iou)?;
        unit("tau_ioa", self.tau_ioa)?;
        if !(self.dbscan_eps > 0.0 && self.dbscan_eps < 1.0) {
            return Err(PruneError::OutOfRange {
                name: "dbscan_eps",
                value: self.dbscan_eps,
                range: "(0, 1)",
            });
        }
        if self.dbscan_min_points == 0 {
            return Err(PruneError::OutOfRange {
                name: "dbscan_min_points",
                value: 0.0,
                range: "[1, inf)",
            });
        }
        if !(0.0..1.0).contains(&self.nonoverlap_margin) {
            return Err(PruneError::OutOfRange {
                name: "nonoverlap_margin",
                value: self.nonoverlap_margin,
                range: "[0, 1)",
            });
        }
        Ok(())
    }

    fn ioa(&self, a: &BBox, b: &BBox) -> f64 {
        if self.class_agnostic {
            a.rect.ioa(&b.rect)
        } else {
            a.ioa(b)
        }
    }

    fn iou(&self, a: &BBox, b: &BBox) -> f64 {
        if self.class_agnostic {
            a.rect.iou(&b.rect)
        } else {
            a.iou(b)
        }
    }

    /// DBSCAN distance `1 - max(IoA(a, b), IoA(b, a))`.
    pub fn distance(&self, a: &BBox, b: &BBox) -> f64 {
        1.0 - self.ioa(a, b).max(self.ioa(b, a))
    }

    fn representative(&self, cluster: &[BBox]) -> BBox {
        let rep = if self.class_agnostic {
            bounding_union_any_label(cluster)
        } else {
            bounding_union(cluster)
        };
        rep.expect("clusters are nonempty and single-label unless class-agnostic")
    }
}

/// Keep masked boxes that have no base box with similarity strictly above
/// the threshold.
fn filter_against<F>(masked: &[BBox], base: &[BBox], mut similar: F) -> Vec<BBox>
where
    F: FnMut(&BBox, &BBox) -> bool,
{
    masked
        .iter()
        .filter(|m| !base.iter().any(|b| similar(m, b)))
        .copied()
        .collect()
}

/// IoA box filtering: drop every masked box with `IoA(b_m, b_b) > tau` for
/// some base box.
pub fn filter_masked_boxes(masked: &[BBox], base: &[BBox], cfg: &PruneConfig) -> Vec<BBox> {
    filter_against(masked, base, |m, b| cfg.ioa(m, b) > cfg.tau)
}

/// DBSCAN under the symmetric IoA distance with `distance <= eps`
/// reachability. Every point belongs to exactly one cluster: points that are
/// neither core nor reachable from a core point become singletons. Clusters
/// are returned as sorted index lists, ordered by their smallest index.
pub fn cluster_boxes(boxes: &[BBox], cfg: &PruneConfig) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j == i || cfg.distance(&boxes[i], &boxes[j]) <= cfg.dbscan_eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours
        .iter()
        .map(|nb| nb.len() >= cfg.dbscan_min_points)
        .collect();

    const UNASSIGNED: usize = usize::MAX;
    let mut cluster_of = vec![UNASSIGNED; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for seed in 0..n {
        if cluster_of[seed] != UNASSIGNED || !core[seed] {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![seed];
        cluster_of[seed] = id;
        let mut frontier = vec![seed];
        while let Some(p) = frontier.pop() {
            for &q in &neighbours[p] {
                if cluster_of[q] == UNASSIGNED {
                    cluster_of[q] = id;
                    members.push(q);
                    if core[q] {
                        frontier.push(q);
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    for (i, c) in cluster_of.iter().enumerate() {
        if *c == UNASSIGNED {
            clusters.push(vec![i]);
        }
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}

fn cluster_and_represent(boxes: &[BBox], cfg: &PruneConfig) -> Vec<BBox> {
    cluster_boxes(boxes, cfg)
        .into_iter()
        .map(|idx| {
            let members: Vec<BBox> = idx.into_iter().map(|i| boxes[i]).collect();
            cfg.representative(&members)
        })
        .collect()
}

/// IoA-based pruning: base boxes followed by one enclosing box per cluster
/// of unfiltered masked boxes.
pub fn ioa_box_prune(masked: &[BBox], base: &[BBox], cfg: &PruneConfig) -> Vec<BBox> {
    let filtered = filter_masked_boxes(masked, base, cfg);
    let mut out = base.to_vec();
    out.extend(cluster_and_represent(&filtered, cfg));
    out
}

/// Split boxes detected under `mask` into (non-overlapping, overlapping).
///
/// For each half-plane of the mask the gap is measured along that
/// half-plane's own axis, from the box to the hidden side; a box is
/// non-overlapping only if every gap exceeds `nonoverlap_margin` times the
/// image extent on that axis.
pub fn split_by_mask_proximity(
    boxes: &[BBox],
    mask: &CompositeMask,
    width: u32,
    height: u32,
    cfg: &PruneConfig,
) -> (Vec<BBox>, Vec<BBox>) {
    boxes.iter().partition(|b| {
        mask.parts.iter().all(|part| {
            let extent = match part.axis {
                crate::geometry::Axis::X => f64::from(width),
                crate::geometry::Axis::Y => f64::from(height),
            };
            part.gap_to(&b.rect) > cfg.nonoverlap_margin * extent
        })
    })
}

/// Greedy NMS: the most confident unclustered box absorbs every remaining
/// box whose IoU with it exceeds `tau_iou`; seeds are returned in the order
/// they were picked.
pub fn iou_nms(boxes: &[BBox], tau_iou: f64, class_agnostic: bool) -> Vec<BBox> {
    let mut order: Vec<BBox> = boxes.to_vec();
    order.sort_by(BBox::rank_cmp);
    let cfg = PruneConfig {
        class_agnostic,
        ..PruneConfig::default()
    };
    let mut alive = vec![true; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if !alive[i] {
            continue;
        }
        kept.push(order[i]);
        for j in i + 1..order.len() {
            if alive[j] && cfg.iou(&order[i], &order[j]) > tau_iou {
                alive[j] = false;
            }
        }
    }
    kept
}

/// IoU-variant pruning over already split masked boxes.
pub fn iou_box_prune(
    masked_nonoverlap: &[BBox],
    masked_overlap: &[BBox],
    base: &[BBox],
    cfg: &PruneConfig,
) -> Vec<BBox> {
    let no_filtered = filter_against(masked_nonoverlap, base, |m, b| cfg.iou(m, b) > cfg.tau_iou);
    let no_pruned = iou_nms(&no_filtered, cfg.tau_iou, cfg.class_agnostic);
    let o_filtered = filter_against(masked_overlap, base, |m, b| cfg.ioa(m, b) > cfg.tau_ioa);
    let o_pruned = cluster_and_represent(&o_filtered, cfg);
    let mut out = base.to_vec();
    out.extend(no_pruned);
    out.extend(o_pruned);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Axis;
    use crate::masking::{HalfPlaneMask, Side};

    const CAT: u32 = 0;
    const DOG: u32 = 1;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64, label: u32, c: f64) -> BBox {
        BBox::from_coords(x0, y0, x1, y1, label, c).unwrap()
    }

    #[test]
    fn default_config_validates() {
        PruneConfig::default().validate().unwrap();
        let bad = PruneConfig { tau: 0.0, ..PruneConfig::default() };
        assert!(bad.validate().is_err());
        let bad = PruneConfig { dbscan_eps: 1.0, ..PruneConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn filtering_examples() {
        let cfg = PruneConfig::default();
        let masked = [bx(0., 0., 10., 10., CAT, 0.9)];
        let base = [bx(0., 0., 12., 10., CAT, 0.95)];
        assert!(filter_masked_boxes(&masked, &base, &cfg).is_empty());
        assert_eq!(filter_masked_boxes(&masked, &[], &cfg), masked.to_vec());
        let dog = [bx(0., 0., 12., 10., DOG, 0.95)];
        assert_eq!(filter_masked_boxes(&masked, &dog, &cfg), masked.to_vec());
        let agnostic = PruneConfig { class_agnostic: true, ..cfg };
        assert!(filter_masked_boxes(&masked, &dog, &agnostic).is_empty());
    }

    #[test]
    fn filtering_is_strict() {
        // IoA exactly 0.6 is not above tau = 0.6.
        let cfg = PruneConfig::default();
        let masked = [bx(0., 0., 10., 10., CAT, 0.9)];
        let base = [bx(4., 0., 20., 10., CAT, 0.9)];
        assert_eq!(filter_masked_boxes(&masked, &base, &cfg).len(), 1);
    }

    #[test]
    fn clustering_examples() {
        let cfg = PruneConfig::default();
        let nested = [bx(0., 0., 10., 10., CAT, 1.), bx(0., 0., 10., 9., CAT, 1.)];
        assert_eq!(cluster_boxes(&nested, &cfg), vec![vec![0, 1]]);
        let halves = [bx(0., 0., 6., 10., CAT, 1.), bx(4., 0., 10., 10., CAT, 1.)];
        assert!((cfg.distance(&halves[0], &halves[1]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cluster_boxes(&halves, &cfg), vec![vec![0], vec![1]]);
        assert_eq!(cluster_boxes(&halves[..1], &cfg), vec![vec![0]]);
        assert!(cluster_boxes(&[], &cfg).is_empty());
    }

    #[test]
    fn clustering_is_transitive_through_chains() {
        let cfg = PruneConfig::default();
        // a ⊂ b ⊂ c pairwise linked by containment; d far away.
        let boxes = [
            bx(0., 0., 2., 2., CAT, 1.),
            bx(50., 50., 60., 60., CAT, 1.),
            bx(0., 0., 4., 4., CAT, 1.),
            bx(0., 0., 8., 8., CAT, 1.),
        ];
        assert_eq!(cluster_boxes(&boxes, &cfg), vec![vec![0, 2, 3], vec![1]]);
    }

    #[test]
    fn min_points_above_one_keeps_outliers_as_singletons() {
        let cfg = PruneConfig { dbscan_min_points: 3, ..PruneConfig::default() };
        let boxes = [
            bx(0., 0., 10., 10., CAT, 1.),
            bx(0., 0., 10., 9.5, CAT, 1.),
            bx(0., 0., 9.5, 10., CAT, 1.),
            bx(50., 50., 60., 60., CAT, 1.),
        ];
        assert_eq!(cluster_boxes(&boxes, &cfg), vec![vec![0, 1, 2], vec![3]]);
    }

    #[test]
    fn labels_never_cluster_together() {
        let cfg = PruneConfig::default();
        let boxes = [bx(0., 0., 10., 10., CAT, 1.), bx(0., 0., 10., 10., DOG, 1.)];
        assert_eq!(cluster_boxes(&boxes, &cfg).len(), 2);
        let agnostic = PruneConfig { class_agnostic: true, ..cfg };
        assert_eq!(cluster_boxes(&boxes, &agnostic).len(), 1);
    }

    #[test]
    fn ioa_prune_examples() {
        let cfg = PruneConfig::default();
        let base = [bx(10., 10., 30., 30., CAT, 1.0)];
        let masked = [bx(10., 10., 20., 30., CAT, 0.5), bx(15., 10., 30., 30., CAT, 0.75)];
        assert_eq!(ioa_box_prune(&masked, &base, &cfg), base.to_vec());

        let attacked = [bx(0., 0., 6., 10., CAT, 0.9), bx(4., 0., 10., 10., CAT, 0.8)];
        let out = ioa_box_prune(&attacked, &[], &cfg);
        assert_eq!(out, attacked.to_vec());

        assert_eq!(ioa_box_prune(&[], &base, &cfg), base.to_vec());
    }

    #[test]
    fn ioa_prune_unions_clusters() {
        let cfg = PruneConfig::default();
        let masked = [bx(0., 0., 10., 10., CAT, 0.4), bx(0., 0., 10., 9.5, CAT, 0.8)];
        let out = ioa_box_prune(&masked, &[], &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].rect.coords(), [0., 0., 10., 10.]);
        assert_eq!(out[0].confidence(), 0.8);
    }

    fn low_x(cut: u32) -> CompositeMask {
        CompositeMask {
            id: 0,
            parts: vec![HalfPlaneMask { axis: Axis::X, side: Side::Low, cut }],
        }
    }

    #[test]
    fn split_uses_the_cut_axis() {
        let cfg = PruneConfig::default();
        let b = bx(40., 20., 60., 80., CAT, 1.);
        // Gap 10 along x exceeds 5% of 100.
        let (no, o) = split_by_mask_proximity(&[b], &low_x(30), 100, 100, &cfg);
        assert_eq!((no.len(), o.len()), (1, 0));
        // Gap 4 does not.
        let (no, o) = split_by_mask_proximity(&[b], &low_x(36), 100, 100, &cfg);
        assert_eq!((no.len(), o.len()), (0, 1));
        // Touching the mask boundary.
        let (no, _) = split_by_mask_proximity(&[b], &low_x(40), 100, 100, &cfg);
        assert!(no.is_empty());
    }

    #[test]
    fn split_composite_needs_distance_from_every_part() {
        let cfg = PruneConfig::default();
        let b = bx(40., 40., 60., 60., CAT, 1.);
        let both = CompositeMask {
            id: 0,
            parts: vec![
                HalfPlaneMask { axis: Axis::X, side: Side::Low, cut: 20 },
                HalfPlaneMask { axis: Axis::Y, side: Side::High, cut: 80 },
            ],
        };
        let (no, _) = split_by_mask_proximity(&[b], &both, 100, 100, &cfg);
        assert_eq!(no.len(), 1);
        let near = CompositeMask {
            id: 0,
            parts: vec![
                HalfPlaneMask { axis: Axis::X, side: Side::Low, cut: 20 },
                HalfPlaneMask { axis: Axis::Y, side: Side::High, cut: 62 },
            ],
        };
        let (no, _) = split_by_mask_proximity(&[b], &near, 100, 100, &cfg);
        assert!(no.is_empty());
    }

    #[test]
    fn nms_examples() {
        let a = bx(0., 0., 10., 10., CAT, 0.9);
        let a2 = bx(0., 0., 10., 10., CAT, 0.8);
        assert_eq!(iou_nms(&[a2, a], 0.8, false), vec![a]);

        let far = bx(50., 50., 60., 60., CAT, 0.3);
        assert_eq!(iou_nms(&[far, a], 0.8, false), vec![a, far]);

        // IoU(a, b) = IoU(b, c) = 90/110, IoU(a, c) = 80/120.
        let a = bx(0., 0., 10., 10., CAT, 0.9);
        let b = bx(0., 1., 10., 11., CAT, 0.8);
        let c = bx(0., 2., 10., 12., CAT, 0.7);
        assert!(a.iou(&b) > 0.8 && a.iou(&c) <= 0.8);
        assert_eq!(iou_nms(&[c, b, a], 0.8, false), vec![a, c]);
    }

    #[test]
    fn iou_prune_examples() {
        let cfg = PruneConfig { score: ScoreKind::IouVariant, ..PruneConfig::default() };
        let base = [bx(10., 10., 30., 30., CAT, 1.0)];
        let same = [bx(10., 10., 30., 30., CAT, 0.9), bx(10., 10., 30., 30., CAT, 0.7)];
        assert_eq!(iou_box_prune(&same, &[], &base, &cfg), base.to_vec());

        let near = [
            bx(10., 10., 30., 30., CAT, 0.7),
            bx(10., 10., 30., 30.5, CAT, 0.9),
            bx(10.2, 10., 30., 30., CAT, 0.8),
        ];
        let out = iou_box_prune(&near, &[], &[], &cfg);
        assert_eq!(out, vec![near[1]]);

        assert!(iou_box_prune(&[], &[], &[], &cfg).is_empty());
        assert_eq!(iou_box_prune(&[], &[], &base, &cfg), base.to_vec());
    }
}
