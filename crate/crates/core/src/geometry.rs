//! Axis-aligned box algebra.
//!
//! Boxes are continuous rectangles: the area of `[x_min, x_max] x [y_min, y_max]`
//! is `width * height` and shared edges have zero area. Every overlap score in
//! the crate (IoA, IoU, the certification bounds) is computed from the
//! quantities defined here.
//!
//! Labelled boxes ([`BBox`]) follow the class rule used throughout detection
//! evaluation: two boxes with different labels have an empty intersection.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate rectangle ({x_min}, {y_min}, {x_max}, {y_max}): extents must be finite with min < max")]
    Degenerate {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("bounding union of an empty box list")]
    EmptyUnion,
    #[error("bounding union over mixed labels {0} and {1}")]
    MixedLabels(Label, Label),
}

/// Image axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Opaque class identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(pub u32);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Label-free rectangle with positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::Degenerate {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Rectangle from a top-left corner and a size, as used for patches.
    pub fn from_origin_size(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// `(min, max)` extent along `axis`.
    pub fn interval(&self, axis: Axis) -> (f64, f64) {
        match axis {
            Axis::X => (self.x_min, self.x_max),
            Axis::Y => (self.y_min, self.y_max),
        }
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Overlap rectangle, or `None` when the overlap has zero area.
    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min < x_max && y_min < y_max).then_some(Rect {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.intersection_area(other) > 0.0
    }

    /// Intersection over the area of `self`.
    pub fn ioa(&self, other: &Rect) -> f64 {
        self.intersection_area(other) / self.area()
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    /// Smallest enclosing rectangle of `self` and `other`.
    pub fn enclose(&self, other: &Rect) -> Rect {
        Rect {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    /// `self` clipped to `bounds`, or `None` if nothing with positive area remains.
    pub fn clamp_to(&self, bounds: &Rect) -> Option<Rect> {
        self.intersection(bounds)
    }
}

/// Gap between the projections of `r` and `o` on `axis`; zero when the
/// intervals overlap or touch.
pub fn axis_gap(r: &Rect, o: &Rect, axis: Axis) -> f64 {
    let (r0, r1) = r.interval(axis);
    let (o0, o1) = o.interval(axis);
    (o0 - r1).max(r0 - o1).max(0.0)
}

/// A detection or annotation: rectangle, class label and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub rect: Rect,
    pub label: Label,
    confidence: f64,
}

impl BBox {
    pub fn new(rect: Rect, label: Label, confidence: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(GeometryError::Confidence(confidence));
        }
        Ok(Self {
            rect,
            label,
            confidence,
        })
    }

    /// Convenience constructor from raw coordinates.
    pub fn from_coords(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        label: u32,
        confidence: f64,
    ) -> Result<Self, GeometryError> {
        Self::new(Rect::new(x_min, y_min, x_max, y_max)?, Label(label), confidence)
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn with_confidence(mut self, confidence: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(GeometryError::Confidence(confidence));
        }
        self.confidence = confidence;
        Ok(self)
    }

    pub fn area(&self) -> f64 {
        self.rect.area()
    }

    /// `|self ∩ other|`, zero across labels.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        if self.label != other.label {
            return 0.0;
        }
        self.rect.intersection_area(&other.rect)
    }

    /// `|self \ other|`; equals `|self|` across labels.
    pub fn difference_area(&self, other: &BBox) -> f64 {
        (self.area() - self.intersection_area(other)).max(0.0)
    }

    pub fn ioa(&self, other: &BBox) -> f64 {
        self.intersection_area(other) / self.area()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    /// Same rectangle and label (confidence ignored).
    pub fn same_geometry(&self, other: &BBox) -> bool {
        self.label == other.label && self.rect == other.rect
    }

    /// Total order used wherever detections need a deterministic ranking:
    /// confidence descending, then coordinates and label ascending.
    pub fn rank_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        other
            .confidence
            .total_cmp(&self.confidence)
            .then_with(|| self.geometry_cmp(other))
    }

    /// Lexicographic order on `(x_min, y_min, x_max, y_max, label)`.
    pub fn geometry_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        let a = self.rect.coords();
        let b = other.rect.coords();
        a.iter()
            .zip(b.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(self.label.cmp(&other.label))
    }
}

/// Minimal enclosing box of same-label boxes; confidence is the maximum of
/// the members.
pub fn bounding_union<'a, I>(boxes: I) -> Result<BBox, GeometryError>
where
    I: IntoIterator<Item = &'a BBox>,
{
    let mut iter = boxes.into_iter();
    let first = *iter.next().ok_or(GeometryError::EmptyUnion)?;
    iter.try_fold(first, |acc, b| {
        if b.label != acc.label {
            return Err(GeometryError::MixedLabels(acc.label, b.label));
        }
        Ok(BBox {
            rect: acc.rect.enclose(&b.rect),
            label: acc.label,
            confidence: acc.confidence.max(b.confidence),
        })
    })
}

/// Enclosing box ignoring labels; the result carries the label of the most
/// confident member (ties broken by [`BBox::rank_cmp`]).
pub fn bounding_union_any_label<'a, I>(boxes: I) -> Result<BBox, GeometryError>
where
    I: IntoIterator<Item = &'a BBox>,
{
    let mut iter = boxes.into_iter();
    let first = *iter.next().ok_or(GeometryError::EmptyUnion)?;
    let (mut rect, mut best) = (first.rect, first);
    for b in iter {
        rect = rect.enclose(&b.rect);
        if b.rank_cmp(&best).is_lt() {
            best = *b;
        }
    }
    Ok(BBox {
        rect,
        label: best.label,
        confidence: best.confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64, label: u32) -> BBox {
        BBox::from_coords(x0, y0, x1, y1, label, 1.0).unwrap()
    }

    const CAT: u32 = 0;
    const DOG: u32 = 1;

    #[test]
    fn area_examples() {
        assert_eq!(b(0., 0., 10., 10., CAT).area(), 100.0);
        assert_eq!(b(3., 4., 3.5, 10., CAT).area(), 3.0);
        assert_eq!(b(0., 0., 1., 1., CAT).area(), 1.0);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(Rect::new(0., 0., 0., 5.).is_err());
        assert!(Rect::new(0., 5., 3., 1.).is_err());
        assert!(Rect::new(0., 0., f64::NAN, 1.).is_err());
        assert!(BBox::from_coords(0., 0., 1., 1., 0, 1.5).is_err());
        assert!(BBox::from_coords(0., 0., 1., 1., 0, -0.1).is_err());
    }

    #[test]
    fn intersection_and_difference() {
        let a = b(0., 0., 10., 10., CAT);
        let c = b(5., 0., 15., 10., CAT);
        let d = b(5., 0., 15., 10., DOG);
        assert_eq!(a.intersection_area(&c), 50.0);
        assert_eq!(a.intersection_area(&d), 0.0);
        assert_eq!(a.intersection_area(&a), a.area());
        assert_eq!(a.difference_area(&a), 0.0);
        assert_eq!(a.difference_area(&c), 50.0);
        assert_eq!(a.difference_area(&d), 100.0);
        let far = b(20., 20., 30., 30., CAT);
        assert_eq!(a.difference_area(&far), 100.0);
    }

    #[test]
    fn ioa_iou_examples() {
        let a = b(0., 0., 10., 10., CAT);
        let c = b(5., 0., 15., 10., CAT);
        assert_eq!(a.ioa(&a), 1.0);
        assert_eq!(a.ioa(&c), 0.5);
        assert_eq!(a.ioa(&b(5., 0., 15., 10., DOG)), 0.0);
        assert_eq!(a.iou(&a), 1.0);
        assert!((a.iou(&c) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&b(20., 0., 30., 10., CAT)), 0.0);
    }

    #[test]
    fn bounding_union_examples() {
        let u = bounding_union(&[b(0., 0., 6., 10., CAT), b(4., 0., 10., 10., CAT)]).unwrap();
        assert_eq!(u.rect.coords(), [0., 0., 10., 10.]);
        let single = b(1., 2., 3., 4., CAT);
        assert_eq!(bounding_union(&[single]).unwrap(), single);
        let u = bounding_union(&[b(0., 0., 1., 1., CAT), b(9., 9., 10., 10., CAT)]).unwrap();
        assert_eq!(u.rect.coords(), [0., 0., 10., 10.]);
        assert_eq!(bounding_union(&[]), Err(GeometryError::EmptyUnion));
        assert!(matches!(
            bounding_union(&[b(0., 0., 1., 1., CAT), b(0., 0., 1., 1., DOG)]),
            Err(GeometryError::MixedLabels(..))
        ));
    }

    #[test]
    fn union_keeps_max_confidence() {
        let lo = BBox::from_coords(0., 0., 1., 1., CAT, 0.2).unwrap();
        let hi = BBox::from_coords(2., 2., 3., 3., CAT, 0.7).unwrap();
        assert_eq!(bounding_union(&[lo, hi]).unwrap().confidence(), 0.7);
    }

    #[test]
    fn axis_gap_examples() {
        let r = Rect::new(10., 0., 20., 5.).unwrap();
        let o = Rect::new(40., 0., 60., 5.).unwrap();
        assert_eq!(axis_gap(&r, &o, Axis::X), 20.0);
        assert_eq!(axis_gap(&o, &r, Axis::X), 20.0);
        assert_eq!(axis_gap(&r, &o, Axis::Y), 0.0);
        let t0 = Rect::new(0., 0., 5., 1.).unwrap();
        let t1 = Rect::new(5., 0., 9., 1.).unwrap();
        assert_eq!(axis_gap(&t0, &t1, Axis::X), 0.0);
    }

    #[test]
    fn rank_order_is_total() {
        let a = BBox::from_coords(0., 0., 1., 1., CAT, 0.5).unwrap();
        let c = BBox::from_coords(0., 0., 2., 1., CAT, 0.5).unwrap();
        let d = BBox::from_coords(5., 5., 6., 6., CAT, 0.9).unwrap();
        let mut v = vec![c, a, d];
        v.sort_by(BBox::rank_cmp);
        assert_eq!(v, vec![d, a, c]);
    }
}
