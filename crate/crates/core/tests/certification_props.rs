use objectseeker::certification::{
    certify_object, l_ioa, l_iou, BoundKind, CertConfig, LocationModel, PatchSpec,
};
use objectseeker::{
    generate_mask_set, precompute_store, BBox, ImageMeta, Label, MaskSetConfig, PruneConfig, Rect,
    ScoreKind, SyntheticDetector, SyntheticDetectorConfig, ThresholdConfig,
};
use proptest::prelude::*;

const SIZE: u32 = 48;

fn int_box(max: u32) -> impl Strategy<Value = BBox> {
    (0..max - 4, 0..max - 4, 4u32..20, 4u32..20, 1u32..3).prop_map(move |(x, y, w, h, l)| {
        let r = Rect::new(
            f64::from(x),
            f64::from(y),
            f64::from((x + w).min(max)),
            f64::from((y + h).min(max)),
        )
        .unwrap();
        BBox::new(r, Label(l), 1.0).unwrap()
    })
}

fn image() -> impl Strategy<Value = ImageMeta> {
    prop::collection::vec(int_box(SIZE), 1..4).prop_map(|gt| ImageMeta {
        image_id: "p".into(),
        width: SIZE,
        height: SIZE,
        ground_truth: gt,
    })
}

fn unit_box() -> impl Strategy<Value = BBox> {
    (0.0..80.0f64, 0.0..80.0f64, 1.0..30.0f64, 1.0..30.0f64)
        .prop_map(|(x, y, w, h)| BBox::from_coords(x, y, x + w, y + h, 0, 1.0).unwrap())
}

struct Run {
    models: std::collections::BTreeMap<LocationModel, bool>,
}

fn certify(image: &ImageMeta, cert: CertConfig, prune: &PruneConfig) -> Vec<Run> {
    let set = generate_mask_set(MaskSetConfig::new(3, SIZE, SIZE).unwrap()).unwrap();
    let det = SyntheticDetector::new(SyntheticDetectorConfig::default()).unwrap();
    let store = precompute_store(&det, std::slice::from_ref(image), &set).unwrap();
    let thresholds = ThresholdConfig::new(0.0, 0.3, 0.3).unwrap();
    image
        .ground_truth
        .iter()
        .map(|gt| {
            let out = certify_object(
                gt,
                image,
                &store,
                &set,
                &PatchSpec::explicit(4, 4, 4),
                &cert,
                &thresholds,
                prune,
            )
            .unwrap();
            Run { models: out.into_iter().map(|(m, o)| (m, o.certified)).collect() }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn raising_the_threshold_never_certifies_more(image in image(), t in 0.0..0.6f64, dt in 0.0..0.3f64) {
        let prune = PruneConfig::default();
        let low = certify(&image, CertConfig { threshold: t, ..CertConfig::default() }, &prune);
        let high = certify(&image, CertConfig { threshold: t + dt, ..CertConfig::default() }, &prune);
        for (l, h) in low.iter().zip(&high) {
            for m in LocationModel::ALL {
                prop_assert!(!h.models[&m] || l.models[&m], "{m}");
            }
        }
    }

    #[test]
    fn all_is_the_conjunction_of_the_partition(image in image()) {
        for r in certify(&image, CertConfig::default(), &PruneConfig::default()) {
            let parts = [LocationModel::Far, LocationModel::Close, LocationModel::Over];
            prop_assert_eq!(r.models[&LocationModel::All], parts.iter().all(|m| r.models[m]));
        }
    }

    #[test]
    fn equivalence_classes_change_nothing(image in image(), iou in any::<bool>()) {
        let (bound, score) = if iou {
            (BoundKind::Iou, ScoreKind::IouVariant)
        } else {
            (BoundKind::Ioa, ScoreKind::Ioa)
        };
        let prune = PruneConfig { score, ..PruneConfig::default() };
        let fast = CertConfig { bound, ..CertConfig::default() };
        let slow = CertConfig { use_equivalence_classes: false, ..fast };
        let a = certify(&image, fast, &prune);
        let b = certify(&image, slow, &prune);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.models, &y.models);
        }
    }
}

proptest! {
    #[test]
    fn ioa_bound_holds_for_every_sampled_filter(gt in unit_box(), m in unit_box(), cands in prop::collection::vec(unit_box(), 30), tau in 0.3..0.95f64) {
        let bound = l_ioa(&gt, &m, tau);
        for b in &cands {
            if m.ioa(b) >= tau {
                prop_assert!(gt.ioa(b) >= bound - 1e-9, "{} < {}", gt.ioa(b), bound);
            }
        }
    }

    #[test]
    fn iou_bound_holds_for_every_sampled_filter(gt in unit_box(), m in unit_box(), cands in prop::collection::vec(unit_box(), 30), tau in 0.3..0.95f64) {
        let bound = l_iou(&gt, &m, tau);
        prop_assert!(bound >= 0.0);
        for b in cands.iter().chain([&m]) {
            if m.iou(b) >= tau {
                prop_assert!(gt.iou(b) >= bound - 1e-9, "{} < {}", gt.iou(b), bound);
            }
        }
    }
}
