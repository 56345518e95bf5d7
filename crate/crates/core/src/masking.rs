//! Patch-agnostic mask sets.
//!
//! Each mask hides one side of a vertical or horizontal line. `k` evenly
//! spaced lines per axis give `4k` masks; any patch that does not intersect
//! some line is hidden entirely by at least one of them. Masks are kept as
//! half-plane descriptors, so coverage and visibility are interval arithmetic
//! rather than bitmap operations.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{Axis, Rect};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("k must be at least 1")]
    ZeroLines,
    #[error("image size {width}x{height} must be positive")]
    EmptyImage { width: u32, height: u32 },
    #[error("k={k} puts the last {axis:?} line at {last_cut}, outside the image extent {extent}")]
    LineOutsideImage {
        k: u32,
        axis: Axis,
        last_cut: u64,
        extent: u32,
    },
    #[error("rectangle lies outside the {width}x{height} image")]
    OutOfBounds { width: u32, height: u32 },
    #[error("unknown mask id {0}")]
    UnknownMask(usize),
    #[error("manifest mask {index} has id {id}; ids must be 0..n in order")]
    ManifestId { index: usize, id: usize },
    #[error("manifest masks do not match the canonical single- or two-patch mask set for k={k}, {width}x{height}")]
    NonCanonical { k: u32, width: u32, height: u32 },
    #[error("manifest JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Hides coordinates below the cut.
    Low,
    /// Hides coordinates at or above the cut.
    High,
}

/// One image half: `(X, Low, c)` hides `x < c`, `(X, High, c)` hides `x >= c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HalfPlaneMask {
    pub axis: Axis,
    pub side: Side,
    pub cut: u32,
}

impl HalfPlaneMask {
    /// Clip `r` to the part of it this half-plane leaves visible.
    fn clip_visible(&self, r: [f64; 4]) -> [f64; 4] {
        let [mut x0, mut y0, mut x1, mut y1] = r;
        let c = f64::from(self.cut);
        match (self.axis, self.side) {
            (Axis::X, Side::Low) => x0 = x0.max(c),
            (Axis::X, Side::High) => x1 = x1.min(c),
            (Axis::Y, Side::Low) => y0 = y0.max(c),
            (Axis::Y, Side::High) => y1 = y1.min(c),
        }
        [x0, y0, x1, y1]
    }

    /// Distance from `r` to the hidden half along this mask's axis; zero if
    /// `r` reaches into it.
    pub fn gap_to(&self, r: &Rect) -> f64 {
        let (lo, hi) = r.interval(self.axis);
        let c = f64::from(self.cut);
        match self.side {
            Side::Low => (lo - c).max(0.0),
            Side::High => (c - hi).max(0.0),
        }
    }
}

/// A mask from the active set: one half-plane, or the union of two hidden
/// halves for the two-patch set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompositeMask {
    pub id: usize,
    pub parts: Vec<HalfPlaneMask>,
}

impl CompositeMask {
    /// Bounding rectangle of `o` minus every hidden region, `None` if nothing
    /// of positive area stays visible. For half-planes this is exact: the
    /// visible part of a rectangle is itself a rectangle.
    pub fn visible_region(&self, o: &Rect) -> Option<Rect> {
        let [x0, y0, x1, y1] = self
            .parts
            .iter()
            .fold(o.coords(), |acc, p| p.clip_visible(acc));
        Rect::new(x0, y0, x1, y1).ok()
    }

    pub fn visible_fraction(&self, o: &Rect) -> f64 {
        self.visible_region(o).map_or(0.0, |v| v.area() / o.area())
    }

    /// True iff every point of `r` (up to measure zero) is hidden.
    pub fn covers(&self, r: &Rect) -> bool {
        self.visible_region(r).is_none()
    }
}

/// Parameters of the line grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSetConfig {
    pub k: u32,
    pub width: u32,
    pub height: u32,
}

impl MaskSetConfig {
    pub fn new(k: u32, width: u32, height: u32) -> Result<Self, MaskError> {
        let cfg = Self { k, width, height };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        if self.k == 0 {
            return Err(MaskError::ZeroLines);
        }
        if self.width == 0 || self.height == 0 {
            return Err(MaskError::EmptyImage {
                width: self.width,
                height: self.height,
            });
        }
        for (axis, extent) in [(Axis::X, self.width), (Axis::Y, self.height)] {
            let last_cut = line_spacing(extent, self.k) * u64::from(self.k);
            if last_cut >= u64::from(extent) {
                return Err(MaskError::LineOutsideImage {
                    k: self.k,
                    axis,
                    last_cut,
                    extent,
                });
            }
        }
        Ok(())
    }

    /// Line coordinates `ceil(extent / (k + 1)) * t` for `t = 1..=k`.
    pub fn cuts(&self, axis: Axis) -> Vec<u32> {
        let extent = match axis {
            Axis::X => self.width,
            Axis::Y => self.height,
        };
        let step = line_spacing(extent, self.k);
        (1..=u64::from(self.k))
            .map(|t| u32::try_from(step * t).expect("validated cut fits the image"))
            .collect()
    }

    pub fn image_rect(&self) -> Rect {
        Rect::new(0.0, 0.0, f64::from(self.width), f64::from(self.height))
            .expect("validated image size is positive")
    }
}

fn line_spacing(extent: u32, k: u32) -> u64 {
    u64::from(extent).div_ceil(u64::from(k) + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSetKind {
    SinglePatch,
    TwoPatch,
}

/// The ordered mask family used for inference and certification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    config: MaskSetConfig,
    kind: MaskSetKind,
    masks: Vec<CompositeMask>,
}

/// The `4k` half-plane masks in canonical order: low-x, low-y, high-x,
/// high-y, each by ascending cut.
pub fn generate_mask_set(cfg: MaskSetConfig) -> Result<MaskSet, MaskError> {
    cfg.validate()?;
    let masks = base_masks(&cfg)
        .into_iter()
        .enumerate()
        .map(|(id, m)| CompositeMask { id, parts: vec![m] })
        .collect();
    Ok(MaskSet {
        config: cfg,
        kind: MaskSetKind::SinglePatch,
        masks,
    })
}

/// Every unordered pair of base masks (diagonal pairs collapse to the base
/// mask itself), in lexicographic pair order: `4k(4k+1)/2` masks.
pub fn generate_two_patch_mask_set(cfg: MaskSetConfig) -> Result<MaskSet, MaskError> {
    cfg.validate()?;
    let base = base_masks(&cfg);
    let mut masks = Vec::with_capacity(base.len() * (base.len() + 1) / 2);
    for (i, a) in base.iter().enumerate() {
        for b in &base[i..] {
            let parts = if a == b { vec![*a] } else { vec![*a, *b] };
            masks.push(CompositeMask {
                id: masks.len(),
                parts,
            });
        }
    }
    Ok(MaskSet {
        config: cfg,
        kind: MaskSetKind::TwoPatch,
        masks,
    })
}

fn base_masks(cfg: &MaskSetConfig) -> Vec<HalfPlaneMask> {
    let xs = cfg.cuts(Axis::X);
    let ys = cfg.cuts(Axis::Y);
    let family = |axis, side, cuts: &[u32]| {
        cuts.iter()
            .map(move |&cut| HalfPlaneMask { axis, side, cut })
            .collect::<Vec<_>>()
    };
    [
        family(Axis::X, Side::Low, &xs),
        family(Axis::Y, Side::Low, &ys),
        family(Axis::X, Side::High, &xs),
        family(Axis::Y, Side::High, &ys),
    ]
    .concat()
}

impl MaskSet {
    pub fn config(&self) -> &MaskSetConfig {
        &self.config
    }
    pub fn kind(&self) -> MaskSetKind {
        self.kind
    }
    pub fn masks(&self) -> &[CompositeMask] {
        &self.masks
    }
    pub fn len(&self) -> usize {
        self.masks.len()
    }
    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&CompositeMask, MaskError> {
        self.masks.get(id).ok_or(MaskError::UnknownMask(id))
    }

    /// Coverage test with an image-bounds check on `r`.
    pub fn covers(&self, id: usize, r: &Rect) -> Result<bool, MaskError> {
        if !self.config.image_rect().contains(r) {
            return Err(MaskError::OutOfBounds {
                width: self.config.width,
                height: self.config.height,
            });
        }
        Ok(self.get(id)?.covers(r))
    }

    pub fn manifest(&self) -> MaskManifest {
        MaskManifest {
            k: self.config.k,
            width: self.config.width,
            height: self.config.height,
            masks: self.masks.clone(),
        }
    }

    /// Hex SHA-256 of the compact manifest serialization.
    pub fn hash(&self) -> String {
        self.manifest().hash()
    }

    /// Rebuild a mask set from a manifest, accepting only the canonical
    /// single- or two-patch sets for the manifest's configuration.
    pub fn from_manifest(manifest: &MaskManifest) -> Result<Self, MaskError> {
        for (index, m) in manifest.masks.iter().enumerate() {
            if m.id != index {
                return Err(MaskError::ManifestId { index, id: m.id });
            }
        }
        let cfg = MaskSetConfig::new(manifest.k, manifest.width, manifest.height)?;
        for candidate in [generate_mask_set(cfg)?, generate_two_patch_mask_set(cfg)?] {
            if candidate.masks == manifest.masks {
                return Ok(candidate);
            }
        }
        Err(MaskError::NonCanonical {
            k: cfg.k,
            width: cfg.width,
            height: cfg.height,
        })
    }
}

/// Wire form of a mask set, shared with external detector adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub k: u32,
    pub width: u32,
    pub height: u32,
    pub masks: Vec<CompositeMask>,
}

impl MaskManifest {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Pretty JSON with a trailing newline; byte-stable for a given set.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, MaskError> {
        serde_json::from_str(s).map_err(|e| MaskError::Json(e.to_string()))
    }
}
