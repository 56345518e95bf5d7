use std::path::Path;

use anyhow::{bail, Context};
use clap::Args;
use objectseeker::certification::{BoundKind, CertConfig, LocationModel, PatchShape, PatchSpec};
use objectseeker::{
    MaskSetConfig, PruneConfig, ScoreKind, SyntheticDetectorConfig, ThresholdConfig,
};
use serde::{Deserialize, Serialize};

/// Every tunable, with defaults. Loaded from a TOML file of `key = value`
/// lines, then overridden by flags of the same name in kebab-case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub k: u32,
    pub two_patch: bool,

    pub score: ScoreKind,
    pub tau: f64,
    pub tau_iou: f64,
    pub tau_ioa: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_points: usize,
    pub class_agnostic: bool,
    pub nonoverlap_margin: f64,

    pub gamma_b: f64,
    pub alpha: f64,
    pub beta: f64,

    /// Certification threshold `T`.
    pub threshold: f64,
    pub bound: BoundKind,
    pub certify_class: bool,
    pub equivalence_classes: bool,
    pub location_models: Vec<LocationModel>,

    /// `square`, `rectangle` or `explicit`.
    pub patch_shape: String,
    pub patch_area: f64,
    pub patch_aspect: f64,
    pub patch_width: u32,
    pub patch_height: u32,
    pub stride: u32,
    pub patch_count: u8,

    pub visibility_threshold: f64,

    pub match_iou: f64,
    pub target_recall: Option<f64>,
    pub size_buckets: Vec<f64>,

    pub seed: u64,
    pub trials: usize,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prune = PruneConfig::default();
        let thresholds = ThresholdConfig::default();
        Self {
            k: 30,
            two_patch: false,
            score: prune.score,
            tau: prune.tau,
            tau_iou: prune.tau_iou,
            tau_ioa: prune.tau_ioa,
            dbscan_eps: prune.dbscan_eps,
            dbscan_min_points: prune.dbscan_min_points,
            class_agnostic: prune.class_agnostic,
            nonoverlap_margin: prune.nonoverlap_margin,
            gamma_b: thresholds.gamma_b,
            alpha: thresholds.alpha,
            beta: thresholds.beta,
            threshold: 0.0,
            bound: BoundKind::Ioa,
            certify_class: true,
            equivalence_classes: true,
            location_models: LocationModel::ALL.to_vec(),
            patch_shape: "square".into(),
            patch_area: 0.01,
            patch_aspect: 1.0,
            patch_width: 0,
            patch_height: 0,
            stride: 1,
            patch_count: 1,
            visibility_threshold: SyntheticDetectorConfig::default().visibility_threshold,
            match_iou: 0.5,
            target_recall: None,
            size_buckets: Vec::new(),
            seed: 0,
            trials: 1000,
            threads: None,
        }
    }
}

/// Flag overrides; unset flags keep the file or default value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub k: Option<u32>,
    #[arg(long)]
    pub two_patch: Option<bool>,
    #[arg(long, value_parser = parse_score)]
    pub score: Option<ScoreKind>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_iou: Option<f64>,
    #[arg(long)]
    pub tau_ioa: Option<f64>,
    #[arg(long)]
    pub dbscan_eps: Option<f64>,
    #[arg(long)]
    pub dbscan_min_points: Option<usize>,
    #[arg(long)]
    pub class_agnostic: Option<bool>,
    #[arg(long)]
    pub nonoverlap_margin: Option<f64>,
    #[arg(long)]
    pub gamma_b: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_parser = parse_bound)]
    pub bound: Option<BoundKind>,
    #[arg(long)]
    pub certify_class: Option<bool>,
    #[arg(long)]
    pub equivalence_classes: Option<bool>,
    /// Comma-separated subset of far,close,over,all.
    #[arg(long, value_delimiter = ',', value_parser = parse_model)]
    pub location_models: Option<Vec<LocationModel>>,
    #[arg(long)]
    pub patch_shape: Option<String>,
    #[arg(long)]
    pub patch_area: Option<f64>,
    #[arg(long)]
    pub patch_aspect: Option<f64>,
    #[arg(long)]
    pub patch_width: Option<u32>,
    #[arg(long)]
    pub patch_height: Option<u32>,
    #[arg(long)]
    pub stride: Option<u32>,
    #[arg(long)]
    pub patch_count: Option<u8>,
    #[arg(long)]
    pub visibility_threshold: Option<f64>,
    #[arg(long)]
    pub match_iou: Option<f64>,
    #[arg(long)]
    pub target_recall: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub size_buckets: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

fn parse_score(s: &str) -> Result<ScoreKind, String> {
    match s {
        "ioa" => Ok(ScoreKind::Ioa),
        "iou-variant" => Ok(ScoreKind::IouVariant),
        _ => Err(format!("expected ioa or iou-variant, got `{s}`")),
    }
}

fn parse_bound(s: &str) -> Result<BoundKind, String> {
    match s {
        "ioa" => Ok(BoundKind::Ioa),
        "iou" => Ok(BoundKind::Iou),
        _ => Err(format!("expected ioa or iou, got `{s}`")),
    }
}

fn parse_model(s: &str) -> Result<LocationModel, String> {
    LocationModel::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("unknown location model `{s}`"))
}

macro_rules! apply {
    ($cfg:ident, $ov:ident, $($field:ident),* $(,)?) => {
        $(if let Some(v) = $ov.$field.clone() { $cfg.$field = v; })*
    };
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let ov = overrides;
        apply!(
            cfg, ov, k, two_patch, score, tau, tau_iou, tau_ioa, dbscan_eps, dbscan_min_points,
            class_agnostic, nonoverlap_margin, gamma_b, alpha, beta, threshold, bound,
            certify_class, equivalence_classes, location_models, patch_shape, patch_area,
            patch_aspect, patch_width, patch_height, stride, patch_count, visibility_threshold,
            match_iou, seed, trials,
        );
        if ov.target_recall.is_some() {
            cfg.target_recall = ov.target_recall;
        }
        if let Some(v) = &ov.size_buckets {
            cfg.size_buckets = v.clone();
        }
        if ov.threads.is_some() {
            cfg.threads = ov.threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        self.prune().validate()?;
        self.thresholds().validate()?;
        self.cert().validate(&self.prune())?;
        self.patch()?;
        if !(self.visibility_threshold > 0.0 && self.visibility_threshold <= 1.0) {
            bail!("visibility_threshold {} outside (0, 1]", self.visibility_threshold);
        }
        if let Some(r) = self.target_recall {
            if !(0.0..=1.0).contains(&r) {
                bail!("target_recall {r} outside [0, 1]");
            }
        }
        if self.threads == Some(0) {
            bail!("threads must be positive");
        }
        Ok(())
    }

    pub fn mask_config(&self, width: u32, height: u32) -> anyhow::Result<MaskSetConfig> {
        Ok(MaskSetConfig::new(self.k, width, height)?)
    }

    pub fn prune(&self) -> PruneConfig {
        PruneConfig {
            score: self.score,
            tau: self.tau,
            tau_iou: self.tau_iou,
            tau_ioa: self.tau_ioa,
            dbscan_eps: self.dbscan_eps,
            dbscan_min_points: self.dbscan_min_points,
            class_agnostic: self.class_agnostic,
            nonoverlap_margin: self.nonoverlap_margin,
        }
    }

    pub fn thresholds(&self) -> ThresholdConfig {
        ThresholdConfig {
            gamma_b: self.gamma_b,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn cert(&self) -> CertConfig {
        CertConfig {
            threshold: self.threshold,
            bound: self.bound,
            certify_class: self.certify_class,
            use_equivalence_classes: self.equivalence_classes,
        }
    }

    pub fn patch(&self) -> anyhow::Result<PatchSpec> {
        let shape = match self.patch_shape.as_str() {
            "square" => PatchShape::Square,
            "rectangle" => PatchShape::Rectangle {
                aspect: self.patch_aspect,
            },
            "explicit" => PatchShape::Explicit {
                width: self.patch_width,
                height: self.patch_height,
            },
            other => bail!("unknown patch_shape `{other}` (square, rectangle, explicit)"),
        };
        Ok(PatchSpec {
            shape,
            area_fraction: self.patch_area,
            stride: self.stride,
            count: self.patch_count,
        })
    }

    pub fn detector(&self) -> SyntheticDetectorConfig {
        SyntheticDetectorConfig {
            visibility_threshold: self.visibility_threshold,
        }
    }
}
