//! Clean-performance evaluation: matching, precision/recall sweeps, AP and
//! CertR at a target clean recall.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certification::{CertRSummary, CertificationReport, LocationModel};
use crate::detector::{DetectionStore, ImageMeta};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::masking::MaskSet;
use crate::pipeline::{objectseeker_infer, ThresholdConfig};
use crate::pruning::PruneConfig;

/// Written into every metrics report.
pub const AP_METHOD: &str = "all-point precision envelope";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub require_label_match: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            require_label_match: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_threshold > 0.0 && self.iou_threshold <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "match IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(prediction index, ground-truth index)` in the order matched.
    pub assignment: Vec<(usize, usize)>,
}

/// Greedy matching: predictions in rank order (confidence descending, ties by
/// coordinates) each take the unmatched ground truth with the highest IoU
/// above the threshold; lower ground-truth index wins IoU ties.
pub fn match_detections(pred: &[BBox], gt: &[BBox], cfg: &MatchConfig) -> MatchResult {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].rank_cmp(&pred[b]).then(a.cmp(&b)));
    let mut taken = vec![false; gt.len()];
    let mut assignment = Vec::new();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt_box) in gt.iter().enumerate() {
            if taken[g] || (cfg.require_label_match && gt_box.label != pred[p].label) {
                continue;
            }
            let iou = pred[p].rect.iou(&gt_box.rect);
            if iou > cfg.iou_threshold && best.is_none_or(|(_, v)| iou > v) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            assignment.push((p, g));
        }
    }
    let tp = assignment.len();
    MatchResult {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
        assignment,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub gamma_b: f64,
    /// 1 when nothing is predicted.
    pub precision: f64,
    /// 0 when there is no ground truth.
    pub recall: f64,
    /// Present when the point was built from counts; AP is then exact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Counts>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PRPoint {
    pub fn new(gamma_b: f64, precision: f64, recall: f64) -> Self {
        Self { gamma_b, precision, recall, counts: None }
    }

    pub fn from_counts(gamma_b: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize, empty: f64| {
            if den == 0 {
                empty
            } else {
                num as f64 / den as f64
            }
        };
        Self {
            gamma_b,
            precision: ratio(tp, tp + fp, 1.0),
            recall: ratio(tp, tp + fn_, 0.0),
            counts: Some(Counts { tp, fp, fn_ }),
        }
    }
}

/// The 101 base thresholds 0.00, 0.01, ..., 1.00.
pub fn gamma_grid() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) / 100.0).collect()
}

/// Precision and recall of full robust inference at every grid threshold,
/// with the masked threshold coupled through `alpha` and `beta`.
#[allow(clippy::too_many_arguments)]
pub fn pr_sweep(
    images: &[ImageMeta],
    store: &DetectionStore,
    mask_set: &MaskSet,
    prune: &PruneConfig,
    alpha: f64,
    beta: f64,
    cfg: &MatchConfig,
) -> Result<Vec<PRPoint>> {
    cfg.validate()?;
    gamma_grid()
        .into_par_iter()
        .map(|gamma_b| {
            let thresholds = ThresholdConfig::new(gamma_b, alpha, beta)?;
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for image in images {
                let out = objectseeker_infer(image, store, mask_set, &thresholds, prune)?;
                let m = match_detections(&out, &image.ground_truth, cfg);
                tp += m.tp;
                fp += m.fp;
                fn_ += m.fn_;
            }
            Ok(PRPoint::from_counts(gamma_b, tp, fp, fn_))
        })
        .collect()
}

/// Area under the precision envelope `p(r) = max{precision at recall >= r}`.
pub fn average_precision(points: &[PRPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Config("average precision of an empty sweep".into()));
    }
    if let Some(ap) = exact_ap(points) {
        return Ok(ap);
    }
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut envelope = vec![0.0; pts.len()];
    let mut running: f64 = 0.0;
    for i in (0..pts.len()).rev() {
        running = running.max(pts[i].1);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in pts.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    Ok(ap)
}

/// Non-negative fraction; `None` from any operation that overflows.
#[derive(Debug, Clone, Copy)]
struct Frac(u128, u128);

impl Frac {
    fn new(n: usize, d: usize, empty: Frac) -> Frac {
        if d == 0 {
            empty
        } else {
            Frac(n as u128, d as u128).reduced()
        }
    }

    fn reduced(self) -> Frac {
        let (mut a, mut b) = (self.0, self.1);
        while b != 0 {
            (a, b) = (b, a % b);
        }
        if a <= 1 {
            self
        } else {
            Frac(self.0 / a, self.1 / a)
        }
    }

    fn cmp(self, o: Frac) -> Option<std::cmp::Ordering> {
        Some(self.0.checked_mul(o.1)?.cmp(&o.0.checked_mul(self.1)?))
    }

    fn add(self, o: Frac) -> Option<Frac> {
        let n = self.0.checked_mul(o.1)?.checked_add(o.0.checked_mul(self.1)?)?;
        Some(Frac(n, self.1.checked_mul(o.1)?).reduced())
    }

    fn sub(self, o: Frac) -> Option<Frac> {
        let n = self.0.checked_mul(o.1)?.checked_sub(o.0.checked_mul(self.1)?)?;
        Some(Frac(n, self.1.checked_mul(o.1)?).reduced())
    }

    fn mul(self, o: Frac) -> Option<Frac> {
        Some(Frac(self.0.checked_mul(o.0)?, self.1.checked_mul(o.1)?).reduced())
    }
}

/// The same envelope sum in rational arithmetic, rounded once at the end.
fn exact_ap(points: &[PRPoint]) -> Option<f64> {
    let mut pts = Vec::with_capacity(points.len());
    for p in points {
        let c = p.counts?;
        let r = Frac::new(c.tp, c.tp + c.fn_, Frac(0, 1));
        let pr = Frac::new(c.tp, c.tp + c.fp, Frac(1, 1));
        pts.push((r, pr));
    }
    let mut failed = false;
    pts.sort_by(|a, b| {
        let ord = a.0.cmp(b.0).and_then(|o| Some(o.then(b.1.cmp(a.1)?)));
        ord.unwrap_or_else(|| {
            failed = true;
            std::cmp::Ordering::Equal
        })
    });
    if failed {
        return None;
    }
    let mut envelope = vec![Frac(0, 1); pts.len()];
    let mut running = Frac(0, 1);
    for i in (0..pts.len()).rev() {
        if pts[i].1.cmp(running)?.is_gt() {
            running = pts[i].1;
        }
        envelope[i] = running;
    }
    let (mut ap, mut prev) = (Frac(0, 1), Frac(0, 1));
    for (i, &(r, _)) in pts.iter().enumerate() {
        if r.cmp(prev)?.is_gt() {
            ap = ap.add(r.sub(prev)?.mul(envelope[i])?)?;
            prev = r;
        }
    }
    Some(ap.0 as f64 / ap.1 as f64)
}

/// PR points of a ranked list of detections, one per prefix.
pub fn ranked_pr_points(is_tp: &[bool], n_gt: usize) -> Vec<PRPoint> {
    let mut tp = 0;
    is_tp
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            PRPoint::from_counts(i as f64, tp, i + 1 - tp, n_gt - tp)
        })
        .collect()
}

/// Largest grid threshold whose clean recall reaches `target`.
pub fn select_gamma_b(sweep: &[PRPoint], target: f64) -> Result<PRPoint> {
    sweep
        .iter()
        .filter(|p| p.recall >= target)
        .max_by(|a, b| a.gamma_b.total_cmp(&b.gamma_b))
        .copied()
        .ok_or_else(|| {
            let best = sweep.iter().map(|p| p.recall).fold(0.0, f64::max);
            Error::Unreachable(format!(
                "clean recall {target} unreachable (best {best:.4})"
            ))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertRAtRecall {
    pub target_recall: f64,
    pub gamma_b: f64,
    pub clean_recall: f64,
    pub clean_precision: f64,
    pub certr: BTreeMap<LocationModel, CertRSummary>,
}

/// Pick the threshold for `target` and certify there. `certify` receives
/// the chosen base threshold.
pub fn certr_at_recall<F>(target: f64, sweep: &[PRPoint], certify: F) -> Result<CertRAtRecall>
where
    F: FnOnce(f64) -> Result<CertificationReport>,
{
    let chosen = select_gamma_b(sweep, target)?;
    let report = certify(chosen.gamma_b)?;
    Ok(CertRAtRecall {
        target_recall: target,
        gamma_b: chosen.gamma_b,
        clean_recall: chosen.recall,
        clean_precision: chosen.precision,
        certr: report.certr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub lower: f64,
    pub upper: f64,
    pub certr: BTreeMap<LocationModel, CertRSummary>,
}

/// CertR per object-size bucket `[edges[i], edges[i+1])`, the last bucket
/// closed. Size is object area over image area; empty buckets are omitted.
pub fn certr_by_object_size(report: &CertificationReport, edges: &[f64]) -> Result<Vec<SizeBucket>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::Config("size bucket edges must be increasing, at least two".into()));
    }
    let last = edges.len() - 2;
    let mut rows = Vec::new();
    for (i, w) in edges.windows(2).enumerate() {
        let members: Vec<_> = report
            .objects
            .iter()
            .filter(|o| {
                o.size_fraction >= w[0] && (o.size_fraction < w[1] || (i == last && o.size_fraction <= w[1]))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let certr = LocationModel::ALL
            .iter()
            .map(|&m| {
                let n = members.iter().filter(|o| o.certified(m)).count();
                (m, CertRSummary::from_counts(n, members.len()))
            })
            .collect();
        rows.push(SizeBucket {
            lower: w[0],
            upper: w[1],
            certr,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap_method: String,
    pub ap: f64,
    pub match_config: MatchConfig,
    pub pr: Vec<PRPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certr_at_recall: Option<CertRAtRecall>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub size_buckets: Vec<SizeBucket>,
}

impl MetricsReport {
    pub fn new(pr: Vec<PRPoint>, match_config: MatchConfig) -> Result<Self> {
        Ok(Self {
            ap_method: AP_METHOD.to_string(),
            ap: average_precision(&pr)?,
            match_config,
            pr,
            certr_at_recall: None,
            size_buckets: Vec::new(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// The PR table, one row per base threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma_b,precision,recall\n");
        for p in &self.pr {
            out.push_str(&format!("{:.2},{:.6},{:.6}\n", p.gamma_b, p.precision, p.recall));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64, label: u32, c: f64) -> BBox {
        BBox::from_coords(x0, y0, x1, y1, label, c).unwrap()
    }

    #[test]
    fn single_pair_matches() {
        let gt = [bx(0., 0., 10., 10., 1, 1.0)];
        // IoU 0.6 = 75 / 125.
        let hit = [bx(0., 0., 10., 7.5, 1, 0.9)];
        let m = match_detections(&hit, &gt, &MatchConfig::default());
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        let miss = [bx(0., 0., 10., 4., 1, 0.9)];
        let m = match_detections(&miss, &gt, &MatchConfig::default());
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
        let m = match_detections(&[], &gt, &MatchConfig::default());
        assert_eq!(m.fn_, 1);
        let wrong_label = [bx(0., 0., 10., 10., 2, 0.9)];
        assert_eq!(match_detections(&wrong_label, &gt, &MatchConfig::default()).tp, 0);
        let agnostic = MatchConfig { require_label_match: false, ..MatchConfig::default() };
        assert_eq!(match_detections(&wrong_label, &gt, &agnostic).tp, 1);
    }

    #[test]
    fn higher_confidence_matches_first() {
        let gt = [bx(0., 0., 10., 10., 1, 1.0)];
        let preds = [bx(0., 0., 10., 9., 1, 0.5), bx(0., 0., 10., 8., 1, 0.9)];
        let m = match_detections(&preds, &gt, &MatchConfig::default());
        assert_eq!(m.assignment, vec![(1, 0)]);
    }

    #[test]
    fn hand_example_ap() {
        let pts = ranked_pr_points(&[true, false, true], 2);
        let ap = average_precision(&pts).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ap_edge_cases() {
        let perfect = [PRPoint::new(0.0, 1.0, 1.0)];
        assert_eq!(average_precision(&perfect).unwrap(), 1.0);
        let nothing = [PRPoint::from_counts(0.0, 0, 3, 2)];
        assert_eq!(average_precision(&nothing).unwrap(), 0.0);
        assert!(average_precision(&[]).is_err());
    }

    #[test]
    fn gamma_selection() {
        let sweep: Vec<PRPoint> = gamma_grid()
            .into_iter()
            .map(|g| PRPoint::new(g, 1.0, if g <= 0.2 { 0.8 } else { 0.5 }))
            .collect();
        assert_eq!(select_gamma_b(&sweep, 0.8).unwrap().gamma_b, 0.2);
        assert_eq!(select_gamma_b(&sweep, 0.0).unwrap().gamma_b, 1.0);
        assert!(select_gamma_b(&sweep, 0.9).is_err());
    }
}
