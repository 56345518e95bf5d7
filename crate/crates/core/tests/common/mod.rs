//! Brute-force oracles shared by the integration tests. Nothing here calls
//! the geometry or masking code under test.

#![allow(dead_code)]

use std::path::PathBuf;

use objectseeker::detector::{CocoDataset, DetectionStore, DetectionsFixture};
use objectseeker::masking::MaskManifest;
use objectseeker::{BBox, ImageMeta, MaskSet};

pub const PITCH: f64 = 0.25;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub struct Committed {
    pub images: Vec<ImageMeta>,
    pub mask_set: MaskSet,
    pub store: DetectionStore,
    pub manifest_json: String,
}

/// The committed 20-image synthetic dataset (k = 10).
pub fn committed() -> Committed {
    let dir = data_dir();
    let read = |name: &str| std::fs::read_to_string(dir.join(name)).unwrap();
    let images = CocoDataset::from_json(&read("annotations.json")).unwrap().to_images().unwrap();
    let manifest_json = read("masks.json");
    let mask_set = MaskSet::from_manifest(&MaskManifest::from_json(&manifest_json).unwrap()).unwrap();
    let fixture = DetectionsFixture::from_json(&read("detections.json")).unwrap();
    let store = DetectionStore::from_fixture(fixture, &images, &mask_set).unwrap().store;
    Committed { images, mask_set, store, manifest_json }
}

/// Axis-aligned rectangle in raw coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl R {
    pub fn of(b: &BBox) -> Self {
        let [x0, y0, x1, y1] = b.rect.coords();
        R { x0, y0, x1, y1 }
    }

    fn holds(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Area by counting grid cells whose centres fall in the region.
pub fn raster_area(inside: impl Fn(f64, f64) -> bool, lo: (f64, f64), hi: (f64, f64)) -> f64 {
    let nx = ((hi.0 - lo.0) / PITCH).ceil() as i64;
    let ny = ((hi.1 - lo.1) / PITCH).ceil() as i64;
    let mut cells = 0u64;
    for j in 0..ny {
        let y = lo.1 + (j as f64 + 0.5) * PITCH;
        for i in 0..nx {
            let x = lo.0 + (i as f64 + 0.5) * PITCH;
            if inside(x, y) {
                cells += 1;
            }
        }
    }
    cells as f64 * PITCH * PITCH
}

pub struct RasterPair {
    pub area0: f64,
    pub area1: f64,
    pub inter: f64,
}

/// Rasterized areas of `a`, `b` and their overlap; labels respected.
pub fn raster_pair(a: &BBox, b: &BBox) -> RasterPair {
    let (ra, rb) = (R::of(a), R::of(b));
    let lo = (ra.x0.min(rb.x0), ra.y0.min(rb.y0));
    let hi = (ra.x1.max(rb.x1), ra.y1.max(rb.y1));
    let same = a.label == b.label;
    RasterPair {
        area0: raster_area(|x, y| ra.holds(x, y), lo, hi),
        area1: raster_area(|x, y| rb.holds(x, y), lo, hi),
        inter: if same {
            raster_area(|x, y| ra.holds(x, y) && rb.holds(x, y), lo, hi)
        } else {
            0.0
        },
    }
}

/// Half-plane mask on integer pixels: `(axis_x, low, cut)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelHalf {
    pub axis_x: bool,
    pub low: bool,
    pub cut: i64,
}

impl PixelHalf {
    pub fn hides(&self, i: i64, j: i64) -> bool {
        let v = if self.axis_x { i } else { j };
        if self.low {
            v < self.cut
        } else {
            v >= self.cut
        }
    }
}

/// Pixel `(i, j)` of a mask made of one or two halves is hidden iff any half
/// hides it.
pub fn pixel_hidden(parts: &[PixelHalf], i: i64, j: i64) -> bool {
    parts.iter().any(|p| p.hides(i, j))
}

/// Every pixel of the integer rectangle `[x0, x1) x [y0, y1)` is hidden.
pub fn pixel_covers(parts: &[PixelHalf], x0: i64, y0: i64, x1: i64, y1: i64) -> bool {
    (y0..y1).all(|j| (x0..x1).all(|i| pixel_hidden(parts, i, j)))
}

/// Integer object box `[x0, x1) x [y0, y1)` with a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
    pub label: u32,
}

impl PixBox {
    pub fn of(b: &BBox) -> Self {
        let [x0, y0, x1, y1] = b.rect.coords();
        let int = |v: f64| {
            assert_eq!(v, v.round(), "reference needs integer coordinates");
            v as i64
        };
        PixBox { x0: int(x0), y0: int(y0), x1: int(x1), y1: int(y1), label: b.label.0 }
    }

    pub fn area(&self) -> i64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn overlap(&self, o: &PixBox) -> i64 {
        let w = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0);
        let h = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0);
        w * h
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefParams {
    pub k: i64,
    pub patch_w: i64,
    pub patch_h: i64,
    pub stride: i64,
    pub v_min: f64,
    pub gamma_m: f64,
    pub tau: f64,
    pub t: f64,
}

/// Certified flags `[far, close, over, all]` for every object of `image`:
/// pixel-bitmap masks, pixel-counted synthetic detections, every placement
/// on the stride grid.
pub fn reference_certify(image: &ImageMeta, p: &RefParams) -> Vec<[bool; 4]> {
    let (w, h) = (i64::from(image.width), i64::from(image.height));
    let step = |extent: i64| (extent + p.k) / (p.k + 1);
    let mut masks: Vec<PixelHalf> = Vec::new();
    for (axis_x, extent) in [(true, w), (false, h)] {
        for t in 1..=p.k {
            for low in [true, false] {
                masks.push(PixelHalf { axis_x, low, cut: step(extent) * t });
            }
        }
    }
    let bitmaps: Vec<Vec<bool>> = masks
        .iter()
        .map(|m| {
            let mut bm = vec![false; (w * h) as usize];
            for j in 0..h {
                for i in 0..w {
                    bm[(j * w + i) as usize] = m.hides(i, j);
                }
            }
            bm
        })
        .collect();
    let objects: Vec<PixBox> = image.ground_truth.iter().map(PixBox::of).collect();

    // Detections per mask: bounding box of the visible pixels, confidence =
    // visible fraction.
    let detections: Vec<Vec<(PixBox, f64)>> = bitmaps
        .iter()
        .map(|bm| {
            objects
                .iter()
                .filter_map(|o| {
                    let (mut count, mut bx) = (0i64, (i64::MAX, i64::MAX, i64::MIN, i64::MIN));
                    for j in o.y0..o.y1 {
                        for i in o.x0..o.x1 {
                            if !bm[(j * w + i) as usize] {
                                count += 1;
                                bx = (bx.0.min(i), bx.1.min(j), bx.2.max(i + 1), bx.3.max(j + 1));
                            }
                        }
                    }
                    let frac = count as f64 / o.area() as f64;
                    (count > 0 && frac >= p.v_min && frac > p.gamma_m).then_some((
                        PixBox { x0: bx.0, y0: bx.1, x1: bx.2, y1: bx.3, label: o.label },
                        frac,
                    ))
                })
                .collect()
        })
        .collect();

    let positions = |extent: i64, size: i64| {
        let mut v: Vec<i64> = (0..=extent - size).step_by(p.stride as usize).collect();
        if *v.last().unwrap() != extent - size {
            v.push(extent - size);
        }
        v
    };
    let (xs, ys) = (positions(w, p.patch_w), positions(h, p.patch_h));

    objects
        .iter()
        .map(|gt| {
            let good_mask: Vec<bool> = detections
                .iter()
                .map(|dets| {
                    dets.iter().any(|(b, _)| {
                        if b.label != gt.label {
                            return false;
                        }
                        let diff = (b.area() - b.overlap(gt)) as f64;
                        (b.area() as f64 * p.tau - diff) / gt.area() as f64 > p.t
                    })
                })
                .collect();
            let mut flags = [true; 4];
            for &y in &ys {
                for &x in &xs {
                    let covered = bitmaps.iter().zip(&good_mask).any(|(bm, &good)| {
                        good && (y..y + p.patch_h)
                            .all(|j| (x..x + p.patch_w).all(|i| bm[(j * w + i) as usize]))
                    });
                    let r = PixBox { x0: x, y0: y, x1: x + p.patch_w, y1: y + p.patch_h, label: 0 };
                    let gap = |a0: i64, a1: i64, b0: i64, b1: i64| (b0 - a1).max(a0 - b1).max(0) as f64;
                    let model = if r.overlap(gt) > 0 {
                        2
                    } else if gap(r.x0, r.x1, gt.x0, gt.x1) > 0.1 * w as f64
                        && gap(r.y0, r.y1, gt.y0, gt.y1) > 0.1 * h as f64
                    {
                        0
                    } else {
                        1
                    };
                    if !covered {
                        flags[model] = false;
                        flags[3] = false;
                    }
                }
            }
            flags
        })
        .collect()
}
