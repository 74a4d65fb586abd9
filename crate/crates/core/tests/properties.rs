use std::collections::HashMap;
use std::path::Path;

use dacnet_core::dataset::{
    label_combination_stats, make_patient_split, parse_catalog_from_reader, read_manifest_from, write_manifest_to,
    SplitRatios,
};
use dacnet_core::evaluation::{default_grid, f1_at_threshold, tune_thresholds, Provenance};
use dacnet_core::explain::{normalize_map, upsample_bilinear};
use dacnet_core::losses::{bce_element, focal_element};
use dacnet_core::transforms::{build_eval_transform, build_train_transform, normalize, GrayImage, TransformSpec};
use dacnet_core::{DiseaseLabel, FocalParams, ImageRecord, LabelVector, PredictionSet, NUM_DISEASES};
use image::Luma;
use proptest::prelude::*;

fn catalog() -> impl Strategy<Value = Vec<ImageRecord>> {
    prop::collection::vec((1usize..4, 0u16..(1 << NUM_DISEASES)), 3..60).prop_map(|patients| {
        let mut out = Vec::new();
        for (p, (n, bits)) in patients.into_iter().enumerate() {
            let labels =
                LabelVector::from_diseases(DiseaseLabel::ALL.into_iter().filter(|d| bits >> d.index() & 1 == 1));
            for k in 0..n {
                out.push(ImageRecord {
                    image_id: format!("{:08}_{k:03}.png", p + 1),
                    patient_id: format!("{}", p + 1),
                    labels,
                    age: Some(40),
                    gender: None,
                });
            }
        }
        out
    })
}

fn to_csv(records: &[ImageRecord]) -> String {
    let mut s = String::from("Image Index,Finding Labels,Follow-up #,Patient ID,Patient Age,Patient Gender\n");
    for r in records {
        s.push_str(&format!(
            "{},{},0,{},40,F\n",
            r.image_id,
            r.labels.combination_key(),
            r.patient_id
        ));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_are_patient_disjoint_and_deterministic(records in catalog(), seed in any::<u64>()) {
        let m = make_patient_split(&records, SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(m.len(), records.len());
        m.check_patient_disjoint(&records).unwrap();
        let mut split_of_patient = HashMap::new();
        for r in &records {
            let s = m.get(&r.image_id).unwrap();
            prop_assert_eq!(*split_of_patient.entry(r.patient_id.clone()).or_insert(s), s);
        }
        prop_assert_eq!(&m, &make_patient_split(&records, SplitRatios::default(), seed).unwrap());
    }

    #[test]
    fn manifest_round_trips(records in catalog(), seed in any::<u64>()) {
        let m = make_patient_split(&records, SplitRatios::default(), seed).unwrap();
        let mut buf = Vec::new();
        write_manifest_to(&m, &mut buf).unwrap();
        let back = read_manifest_from(buf.as_slice(), Path::new("m.tsv")).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn parser_conserves_rows(records in catalog()) {
        let catalog = parse_catalog_from_reader(to_csv(&records).as_bytes()).unwrap();
        prop_assert_eq!(catalog.records.len(), records.len());
        for (a, b) in catalog.records.iter().zip(&records) {
            prop_assert_eq!(a.labels, b.labels);
        }
        let stats = label_combination_stats(&catalog.records).unwrap();
        prop_assert_eq!(stats.entries.iter().map(|e| e.count).sum::<usize>(), records.len());
        let total: f64 = stats.entries.iter().map(|e| e.fraction).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transforms_always_emit_3x224x224(w in 8u32..320, h in 8u32..320, v in 0.0f32..1.0, seed in any::<u64>()) {
        let img = GrayImage::from_fn(w, h, |x, y| Luma([(v + (x ^ y) as f32 * 0.001).min(1.0)]));
        let eval = build_eval_transform(&TransformSpec::resize_and_flip()).unwrap();
        prop_assert_eq!(eval.apply(&img).unwrap().shape(), [3, 224, 224]);
        let train = build_train_transform(&TransformSpec::crop_flip_jitter(), 17).unwrap();
        let a = train.apply_seeded(&img, seed).unwrap();
        prop_assert_eq!(a.shape(), [3, 224, 224]);
        prop_assert_eq!(a, train.apply_seeded(&img, seed).unwrap());
    }

    #[test]
    fn denormalize_inverts_normalize(pixels in prop::collection::vec(0.0f32..=1.0, 224 * 224)) {
        let img = GrayImage::from_raw(224, 224, pixels.clone()).unwrap();
        let spec = TransformSpec::resize_and_flip();
        let back = normalize(&img, &spec.normalization).unwrap().denormalize(&spec.normalization);
        for c in 0..3 {
            for (i, p) in pixels.iter().enumerate() {
                prop_assert!((back.get(c, i / 224, i % 224) - p).abs() < 1e-6);
            }
        }
    }
}

proptest! {
    #[test]
    fn normalized_cam_is_scale_invariant(raw in prop::collection::vec(0.0f64..10.0, 4..64), c in 0.01f64..100.0) {
        let a = normalize_map(&raw);
        let scaled: Vec<f64> = raw.iter().map(|v| v * c).collect();
        let b = normalize_map(&scaled);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(x));
        }
        let up = upsample_bilinear(&a, 2, a.len() / 2, 224, 224);
        prop_assert!(up.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn tuned_thresholds_never_lose_to_one_half(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..=1.0, NUM_DISEASES), 0u16..(1 << NUM_DISEASES)), 1..80)
    ) {
        let ids = (0..rows.len()).map(|i| format!("{i}.png")).collect();
        let scores = rows.iter().map(|(s, _)| { let mut a = [0.0; NUM_DISEASES]; a.copy_from_slice(s); a }).collect();
        let targets = rows
            .iter()
            .map(|(_, bits)| LabelVector::from_diseases(DiseaseLabel::ALL.into_iter().filter(|d| bits >> d.index() & 1 == 1)))
            .collect();
        let preds = PredictionSet::new(ids, scores, targets).unwrap();
        let grid = default_grid();
        let tuned = tune_thresholds(&preds, &grid, Provenance::Validation).unwrap();
        for d in DiseaseLabel::ALL {
            let t = tuned.get(d);
            prop_assert!(grid.contains(&t));
            let (s, y) = (preds.scores_for(d), preds.targets_for(d));
            prop_assert!(f1_at_threshold(&s, &y, t).unwrap() >= f1_at_threshold(&s, &y, 0.5).unwrap());
        }
    }

    #[test]
    fn focal_never_exceeds_bce(x in -50.0f64..50.0, y in prop::bool::ANY, gamma in 0.0f64..6.0) {
        let y = f64::from(u8::from(y));
        let p = FocalParams::new(gamma, 1.0).unwrap();
        let f = focal_element(x, y, p).unwrap();
        let b = bce_element(x, y).unwrap();
        prop_assert!(f.is_finite() && f >= 0.0);
        prop_assert!(f <= b + 1e-15);
    }

    #[test]
    fn focal_ratio_falls_with_confidence(x1 in -8.0f64..8.0, dx in 0.01f64..4.0, gamma in 0.5f64..5.0) {
        let p = FocalParams::new(gamma, 1.0).unwrap();
        let ratio = |x: f64| focal_element(x, 1.0, p).unwrap() / bce_element(x, 1.0).unwrap();
        let q = 1.0 - 1.0 / (1.0 + (-x1).exp());
        prop_assert!((ratio(x1) - q.powf(gamma)).abs() < 1e-9);
        prop_assert!(ratio(x1 + dx) < ratio(x1));
    }
}
