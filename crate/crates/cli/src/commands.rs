use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use objectseeker::certification::{attack_suite, certify_dataset};
use objectseeker::detector::{CocoDataset, DetectionStore, DetectionsFixture, WireBox};
use objectseeker::masking::MaskManifest;
use objectseeker::metrics::{certr_at_recall, certr_by_object_size, pr_sweep, MetricsReport};
use objectseeker::synthetic::{categories, generate_dataset, SyntheticConfig};
use objectseeker::{
    detector, generate_mask_set, generate_two_patch_mask_set, objectseeker_infer,
    precompute_store, Error, ImageMeta, MaskSet, MatchConfig, SyntheticDetector,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Common, DataArgs, Failure};

type CmdResult = Result<(), Failure>;

fn config_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn data_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn lib_failure(e: Error) -> Failure {
    match e {
        Error::Config(_) => Failure::Config(e.into()),
        _ => Failure::Data(e.into()),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides).map_err(config_failure)?;
    setup_threads(&cfg)?;
    Ok(cfg)
}

/// `threads` from the config and `OBJECTSEEKER_THREADS` both cap the pool.
fn setup_threads(cfg: &RunConfig) -> Result<(), Failure> {
    let env = match std::env::var("OBJECTSEEKER_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => return Err(config_failure(anyhow!("OBJECTSEEKER_THREADS=`{v}` is not a positive integer"))),
        },
        Err(_) => None,
    };
    let threads = match (cfg.threads, env) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    if let Some(n) = threads {
        // A pool may already exist when commands run in-process; keep it.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialised");
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(data_failure)
}

fn write(path: &Path, contents: &str) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .map_err(data_failure)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data_failure)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn build_mask_set(cfg: &RunConfig, width: u32, height: u32) -> Result<MaskSet, Failure> {
    let mask_cfg = cfg.mask_config(width, height).map_err(config_failure)?;
    let set = if cfg.two_patch {
        generate_two_patch_mask_set(mask_cfg)
    } else {
        generate_mask_set(mask_cfg)
    };
    set.map_err(config_failure)
}

/// Envelope shared by every report file.
#[derive(Serialize)]
struct Envelope<'a, T> {
    config: &'a RunConfig,
    mask_manifest_hash: String,
    report: T,
}

struct Loaded {
    cfg: RunConfig,
    images: Vec<ImageMeta>,
    mask_set: MaskSet,
    store: DetectionStore,
}

fn load(common: &Common, data: &DataArgs) -> Result<Loaded, Failure> {
    let mut cfg = load_config(common)?;
    let images = CocoDataset::from_json(&read(&data.annotations)?)
        .and_then(|c| c.to_images())
        .with_context(|| format!("annotations {}", data.annotations.display()))
        .map_err(data_failure)?;

    let mut sizes: Vec<(u32, u32)> = images.iter().map(|i| (i.width, i.height)).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() > 1 {
        return Err(data_failure(anyhow!(
            "images have {} different sizes; one mask set needs a single size",
            sizes.len()
        )));
    }

    let mask_set = match &data.manifest {
        Some(path) => {
            let manifest = MaskManifest::from_json(&read(path)?)
                .and_then(|m| MaskSet::from_manifest(&m))
                .with_context(|| format!("manifest {}", path.display()))
                .map_err(data_failure)?;
            let c = manifest.config();
            if let Some(&(w, h)) = sizes.first() {
                if (w, h) != (c.width, c.height) {
                    return Err(data_failure(anyhow!(
                        "manifest is for {}x{} images, annotations are {w}x{h}",
                        c.width,
                        c.height
                    )));
                }
            }
            if cfg.k != c.k {
                log::info!("k = {} taken from the manifest", c.k);
                cfg.k = c.k;
            }
            cfg.two_patch = manifest.kind() == objectseeker::masking::MaskSetKind::TwoPatch;
            manifest
        }
        None => {
            let (w, h) = match (sizes.first(), data.width, data.height) {
                (Some(&s), _, _) => s,
                (None, Some(w), Some(h)) => (w, h),
                _ => {
                    return Err(data_failure(anyhow!(
                        "no images to take the size from; pass --width and --height"
                    )))
                }
            };
            build_mask_set(&cfg, w, h)?
        }
    };

    let store = match &data.detections {
        Some(path) => {
            let fixture = DetectionsFixture::from_json(&read(path)?)
                .with_context(|| format!("detections {}", path.display()))
                .map_err(data_failure)?;
            DetectionStore::from_fixture(fixture, &images, &mask_set)
                .with_context(|| format!("detections {}", path.display()))
                .map_err(data_failure)?
                .store
        }
        None => {
            let det = SyntheticDetector::new(cfg.detector()).map_err(config_failure)?;
            precompute_store(&det, &images, &mask_set).map_err(data_failure)?
        }
    };
    Ok(Loaded { cfg, images, mask_set, store })
}

pub fn gen_masks(common: &Common, width: u32, height: u32, out: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    let set = build_mask_set(&cfg, width, height)?;
    write(out, &set.manifest().to_json())?;
    println!("{} masks, hash {}", set.len(), set.hash());
    Ok(())
}

pub fn synth(
    common: &Common,
    n_images: usize,
    objects_per_image: usize,
    width: u32,
    height: u32,
    out_dir: &Path,
) -> CmdResult {
    let cfg = load_config(common)?;
    let synth_cfg = SyntheticConfig {
        n_images,
        objects_per_image,
        width,
        height,
        seed: cfg.seed,
        ..SyntheticConfig::default()
    };
    let images = generate_dataset(&synth_cfg).map_err(lib_failure)?;
    let set = build_mask_set(&cfg, width, height)?;
    let det = SyntheticDetector::new(cfg.detector()).map_err(config_failure)?;
    let store = precompute_store(&det, &images, &set).map_err(data_failure)?;
    let coco = CocoDataset::from_images(&images, categories(&synth_cfg)).map_err(data_failure)?;
    write(&out_dir.join("annotations.json"), &coco.to_json())?;
    write(&out_dir.join("masks.json"), &set.manifest().to_json())?;
    write(&out_dir.join("detections.json"), &store.to_fixture().to_json())?;
    println!(
        "{} images, {} objects, {} masks",
        images.len(),
        coco.annotations.len(),
        set.len()
    );
    Ok(())
}

pub fn infer(common: &Common, data: &DataArgs, out: &Path) -> CmdResult {
    let l = load(common, data)?;
    let (thresholds, prune) = (l.cfg.thresholds(), l.cfg.prune());
    let mut results: BTreeMap<&str, Vec<WireBox>> = BTreeMap::new();
    for image in &l.images {
        let boxes = objectseeker_infer(image, &l.store, &l.mask_set, &thresholds, &prune)
            .map_err(lib_failure)?;
        results.insert(&image.image_id, boxes.iter().map(detector::to_wire).collect());
    }
    write(out, &to_json(&results))
}

pub fn certify(common: &Common, data: &DataArgs, out: &Path, csv: Option<&Path>) -> CmdResult {
    let l = load(common, data)?;
    let spec = l.cfg.patch().map_err(config_failure)?;
    let report = certify_dataset(
        &l.images,
        &l.store,
        &l.mask_set,
        &spec,
        &l.cfg.cert(),
        &l.cfg.thresholds(),
        &l.cfg.prune(),
    )
    .map_err(lib_failure)?;
    if let Some(path) = csv {
        write(path, &report.to_csv_for(&l.cfg.location_models))?;
    }
    for &m in &l.cfg.location_models {
        let s = report.summary(m);
        match s.certr {
            Some(c) => println!("{m}: {}/{} certified (CertR {c:.4})", s.certified, s.total),
            None => println!("{m}: no objects"),
        }
    }
    write(
        out,
        &to_json(&Envelope {
            config: &l.cfg,
            mask_manifest_hash: l.mask_set.hash(),
            report,
        }),
    )
}

pub fn eval(common: &Common, data: &DataArgs, out: &Path, csv: Option<&Path>) -> CmdResult {
    let l = load(common, data)?;
    let cfg = &l.cfg;
    let match_cfg = MatchConfig {
        iou_threshold: cfg.match_iou,
        require_label_match: true,
    };
    let prune = cfg.prune();
    let sweep = pr_sweep(&l.images, &l.store, &l.mask_set, &prune, cfg.alpha, cfg.beta, &match_cfg)
        .map_err(lib_failure)?;
    let mut report = MetricsReport::new(sweep, match_cfg).map_err(lib_failure)?;
    let spec = cfg.patch().map_err(config_failure)?;
    let certify_at = |gamma_b: f64| {
        certify_dataset(
            &l.images,
            &l.store,
            &l.mask_set,
            &spec,
            &cfg.cert(),
            &cfg.thresholds().with_gamma_b(gamma_b),
            &prune,
        )
    };
    let mut bucket_gamma = cfg.gamma_b;
    if let Some(target) = cfg.target_recall {
        let at = certr_at_recall(target, &report.pr, certify_at).map_err(lib_failure)?;
        bucket_gamma = at.gamma_b;
        report.certr_at_recall = Some(at);
    }
    if !cfg.size_buckets.is_empty() {
        let cert = certify_at(bucket_gamma).map_err(lib_failure)?;
        report.size_buckets = certr_by_object_size(&cert, &cfg.size_buckets).map_err(lib_failure)?;
    }
    println!("AP {:.6}", report.ap);
    if let Some(at) = &report.certr_at_recall {
        for &m in &cfg.location_models {
            if let Some(c) = at.certr.get(&m).and_then(|s| s.certr) {
                println!("{m}: CertR@{} = {c:.4} (gamma_b {:.2})", at.target_recall, at.gamma_b);
            }
        }
    }
    if let Some(path) = csv {
        write(path, &report.to_csv())?;
    }
    write(
        out,
        &to_json(&Envelope {
            config: cfg,
            mask_manifest_hash: l.mask_set.hash(),
            report,
        }),
    )
}

pub fn attack_sim(common: &Common, data: &DataArgs, out: &Path) -> CmdResult {
    let l = load(common, data)?;
    let spec = l.cfg.patch().map_err(config_failure)?;
    let report = attack_suite(
        &l.images,
        &l.store,
        &l.mask_set,
        &spec,
        &l.cfg.cert(),
        &l.cfg.thresholds(),
        &l.cfg.prune(),
        l.cfg.trials,
        l.cfg.seed,
    )
    .map_err(lib_failure)?;
    println!(
        "{} certified pairs, {} placement classes, {} trials, {} violations",
        report.certified_pairs, report.classes_attacked, report.trials, report.violations
    );
    let violations = report.violations;
    write(
        out,
        &to_json(&Envelope {
            config: &l.cfg,
            mask_manifest_hash: l.mask_set.hash(),
            report,
        }),
    )?;
    if violations > 0 {
        return Err(Failure::Violation(format!("{violations} attacked outputs lost a certified object")));
    }
    Ok(())
}
