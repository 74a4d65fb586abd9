use std::collections::HashMap;

use candle_core::Tensor;
use dacnet_core::models::{build_classifier, pretrained_path, BuildOptions};
use dacnet_core::synthetic::TileImages;
use dacnet_core::transforms::{build_eval_transform, TransformSpec};
use dacnet_core::{BackboneKind, BackboneSpec, Device, DiseaseLabel, Error, ImageTensor, LabelVector, NUM_DISEASES};

fn probe(n: usize) -> Tensor {
    let tf = build_eval_transform(&TransformSpec::resize_and_flip()).unwrap();
    let tiles = TileImages::new(4);
    let images: Vec<ImageTensor> = (0..n)
        .map(|i| {
            let labels = LabelVector::from_diseases([DiseaseLabel::from_index(i % NUM_DISEASES).unwrap()]);
            tf.apply(&tiles.render(labels, i as u64, None)).unwrap()
        })
        .collect();
    ImageTensor::stack(&images, &Device::Cpu).unwrap()
}

fn fresh(kind: BackboneKind, seed: u64) -> dacnet_core::Classifier {
    build_classifier(BackboneSpec::fresh(kind), &BuildOptions::seeded(seed)).unwrap()
}

fn logits(model: &dacnet_core::Classifier, x: &Tensor) -> Vec<Vec<f32>> {
    model.logits(x).unwrap().to_vec2().unwrap()
}

#[test]
fn densenet121_batch_of_two() {
    let model = fresh(BackboneKind::Densenet121, 1);
    let out = logits(&model, &probe(2));
    assert_eq!(out.len(), 2);
    assert!(out
        .iter()
        .all(|r| r.len() == NUM_DISEASES && r.iter().all(|v| v.is_finite())));
    let probs = model.predict_probabilities(&probe(2)).unwrap();
    assert!(probs.iter().flatten().all(|p| *p > 0.0 && *p < 1.0));
}

#[test]
fn densenet121_cam_is_1024x7x7() {
    let model = fresh(BackboneKind::Densenet121, 1);
    let x = probe(1);
    let cap = model
        .capture_cam_features()
        .unwrap()
        .forward_backward(&x, DiseaseLabel::Effusion)
        .unwrap();
    assert_eq!((cap.channels, cap.height, cap.width), (1024, 7, 7));
    assert_eq!(cap.activations.len(), 1024 * 49);
    assert_eq!(cap.gradients.len(), cap.activations.len());
    let direct = logits(&model, &x)[0][DiseaseLabel::Effusion.index()];
    assert!((cap.logit - direct).abs() < 1e-4, "{} vs {direct}", cap.logit);
}

#[test]
fn other_backbones_produce_fourteen_logits() {
    let x = probe(1);
    for kind in [
        BackboneKind::Resnet50,
        BackboneKind::EfficientnetB3,
        BackboneKind::VitBasePatch16,
    ] {
        let model = fresh(kind, 2);
        let out = logits(&model, &x);
        assert_eq!(out[0].len(), NUM_DISEASES, "{kind}");
        assert!(out[0].iter().all(|v| v.is_finite()), "{kind}");
        assert_eq!(kind.supports_cam(), kind != BackboneKind::VitBasePatch16);
        if kind == BackboneKind::VitBasePatch16 {
            let err = model.capture_cam_features().err().unwrap();
            assert!(matches!(err, Error::Unsupported(_)), "{err}");
        } else {
            let cap = model
                .capture_cam_features()
                .unwrap()
                .forward_backward(&x, DiseaseLabel::Mass)
                .unwrap();
            assert_eq!(cap.channels, kind.feature_dim(), "{kind}");
            assert_eq!((cap.height, cap.width), (7, 7), "{kind}");
        }
    }
}

#[test]
fn inference_is_deterministic() {
    let model = fresh(BackboneKind::Densenet121, 3);
    let x = probe(2);
    assert_eq!(logits(&model, &x), logits(&model, &x));
}

#[test]
fn pretrained_weights_are_loaded_and_distinguishable() {
    let dir = tempfile::tempdir().unwrap();
    // a "pretrained" export is just a differently seeded backbone here
    let donor = fresh(BackboneKind::Densenet121, 99);
    let exported: HashMap<String, Tensor> = donor
        .named_tensors()
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("backbone.").map(|r| (r.to_string(), v)))
        .collect();
    let path = pretrained_path(BackboneKind::Densenet121, dir.path());
    candle_core::safetensors::save(&exported, &path).unwrap();

    let opts = BuildOptions {
        init_seed: 7,
        weights_dir: Some(dir.path().to_path_buf()),
        device: Device::Cpu,
    };
    let pretrained = build_classifier(BackboneSpec::pretrained(BackboneKind::Densenet121), &opts).unwrap();
    let scratch = fresh(BackboneKind::Densenet121, 7);

    let p: HashMap<String, Tensor> = pretrained.named_tensors().into_iter().collect();
    for (name, t) in donor.named_tensors() {
        if name.starts_with("backbone.") {
            let diff = (&p[&name] - &t)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert_eq!(diff, 0.0, "{name}");
        }
    }
    let x = probe(1);
    let (a, b) = (logits(&pretrained, &x), logits(&scratch, &x));
    assert!(a[0].iter().zip(&b[0]).any(|(u, v)| (u - v).abs() > 1e-4));
}

#[test]
fn pretrained_export_with_missing_tensor_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let donor = fresh(BackboneKind::TinyTestCnn, 1);
    let mut exported: HashMap<String, Tensor> = donor
        .named_tensors()
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("backbone.").map(|r| (r.to_string(), v)))
        .collect();
    let dropped = exported.keys().next().unwrap().clone();
    exported.remove(&dropped);
    candle_core::safetensors::save(&exported, pretrained_path(BackboneKind::TinyTestCnn, dir.path())).unwrap();
    let opts = BuildOptions {
        init_seed: 1,
        weights_dir: Some(dir.path().to_path_buf()),
        device: Device::Cpu,
    };
    let err = build_classifier(BackboneSpec::pretrained(BackboneKind::TinyTestCnn), &opts).unwrap_err();
    assert!(err.to_string().contains(&dropped), "{err}");
}

#[test]
fn head_gradient_flows_under_focal_loss() {
    let model = fresh(BackboneKind::TinyTestCnn, 5);
    let x = probe(4);
    let targets: Vec<f32> = (0..4 * NUM_DISEASES).map(|i| (i % 3 == 0) as u8 as f32).collect();
    let y = Tensor::from_vec(targets, (4, NUM_DISEASES), &Device::Cpu).unwrap();
    let loss = dacnet_core::LossKind::Focal(Default::default())
        .tensor_loss(&model.forward_t(&x, true).unwrap(), &y)
        .unwrap();
    let grads = loss.backward().unwrap();
    let head: Vec<_> = model
        .trainable_vars()
        .into_iter()
        .filter(|(n, _)| n.starts_with("head."))
        .collect();
    assert_eq!(head.len(), 2);
    for (name, var) in head {
        let g = grads.get(var.as_tensor()).unwrap();
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(norm > 0.0, "{name}");
    }
}
