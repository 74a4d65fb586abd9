//! Backbones and the 14-logit multi-label classifier.
//!
//! Convolutional backbones return their last feature map (`N×K×h×w`); the
//! head averages it spatially and applies a linear map to 14 logits. The
//! ViT returns its class token and has no spatial map, so Grad-CAM is not
//! available for it.
//!
//! Parameters are named `backbone.<upstream name>` and `head.{weight,bias}`.
//! Pretrained backbones are read from `<weights dir>/<kind>.safetensors`
//! using torchvision names for the CNNs and Hugging Face names for the ViT
//! (a leading `vit.` is accepted).

mod densenet;
mod efficientnet;
mod layers;
mod resnet;
mod tiny;
mod vit;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, IndexOp, Module, Tensor, Var};
use candle_nn::{Init, Linear, VarMap};
use serde::{Deserialize, Serialize};

use crate::disease::{DiseaseLabel, NUM_DISEASES};
use crate::error::{Error, Result};
use crate::transforms::{CHANNELS, IMAGE_SIZE};

pub(crate) trait Backbone: Send + Sync {
    fn forward_features(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Densenet121,
    Resnet50,
    EfficientnetB3,
    VitBasePatch16,
    TinyTestCnn,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 5] = [
        BackboneKind::Densenet121,
        BackboneKind::Resnet50,
        BackboneKind::EfficientnetB3,
        BackboneKind::VitBasePatch16,
        BackboneKind::TinyTestCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Densenet121 => "densenet121",
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::EfficientnetB3 => "efficientnet_b3",
            BackboneKind::VitBasePatch16 => "vit_base_patch16",
            BackboneKind::TinyTestCnn => "tiny_test_cnn",
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            BackboneKind::Densenet121 => densenet::FEATURE_DIM,
            BackboneKind::Resnet50 => resnet::FEATURE_DIM,
            BackboneKind::EfficientnetB3 => efficientnet::FEATURE_DIM,
            BackboneKind::VitBasePatch16 => vit::FEATURE_DIM,
            BackboneKind::TinyTestCnn => tiny::FEATURE_DIM,
        }
    }

    /// Whether the backbone exposes a spatial feature map for Grad-CAM.
    pub fn supports_cam(self) -> bool {
        !matches!(self, BackboneKind::VitBasePatch16)
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown backbone {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub pretrained: bool,
}

impl BackboneSpec {
    pub fn fresh(kind: BackboneKind) -> Self {
        Self {
            kind,
            pretrained: false,
        }
    }

    pub fn pretrained(kind: BackboneKind) -> Self {
        Self { kind, pretrained: true }
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub init_seed: u64,
    /// Directory holding `<kind>.safetensors`; defaults to [`default_weights_dir`].
    pub weights_dir: Option<PathBuf>,
    pub device: Device,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            init_seed: 0,
            weights_dir: None,
            device: Device::Cpu,
        }
    }
}

impl BuildOptions {
    pub fn seeded(init_seed: u64) -> Self {
        Self {
            init_seed,
            ..Default::default()
        }
    }
}

/// `$DACNET_WEIGHTS_DIR`, else `$HOME/.cache/dacnet/weights`.
pub fn default_weights_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("DACNET_WEIGHTS_DIR") {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".cache").join("dacnet").join("weights")
}

pub fn pretrained_path(kind: BackboneKind, dir: &Path) -> PathBuf {
    dir.join(format!("{}.safetensors", kind.name()))
}

pub struct Classifier {
    spec: BackboneSpec,
    backbone: Box<dyn Backbone>,
    head: Linear,
    varmap: VarMap,
    device: Device,
}

impl fmt::Debug for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Classifier")
            .field("spec", &self.spec)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

pub fn build_classifier(spec: BackboneSpec, opts: &BuildOptions) -> Result<Classifier> {
    let weights = if spec.pretrained {
        let dir = opts.weights_dir.clone().unwrap_or_else(default_weights_dir);
        let path = pretrained_path(spec.kind, &dir);
        if !path.is_file() {
            return Err(Error::PretrainedUnavailable {
                kind: spec.kind.name().to_string(),
                path,
            });
        }
        Some(path)
    } else {
        None
    };

    let varmap = VarMap::new();
    let vb = layers::SeededStore::var_builder(varmap.clone(), opts.init_seed, &opts.device);
    let bb = vb.pp("backbone");
    let backbone: Box<dyn Backbone> = match spec.kind {
        BackboneKind::Densenet121 => Box::new(densenet::DenseNet121::new(bb)?),
        BackboneKind::Resnet50 => Box::new(resnet::ResNet50::new(bb)?),
        BackboneKind::EfficientnetB3 => Box::new(efficientnet::EfficientNetB3::new(bb)?),
        BackboneKind::VitBasePatch16 => Box::new(vit::VitBase16::new(bb)?),
        BackboneKind::TinyTestCnn => Box::new(tiny::TinyTestCnn::new(bb)?),
    };
    let dim = spec.kind.feature_dim();
    let bound = 1.0 / (dim as f64).sqrt();
    let hv = vb.pp("head");
    let head = Linear::new(
        hv.get_with_hints((NUM_DISEASES, dim), "weight", Init::Uniform { lo: -bound, up: bound })?,
        Some(hv.get_with_hints(NUM_DISEASES, "bias", Init::Const(0.0))?),
    );
    let model = Classifier {
        spec,
        backbone,
        head,
        varmap,
        device: opts.device.clone(),
    };
    if let Some(path) = weights {
        model.load_backbone_weights(&path)?;
    }
    Ok(model)
}

fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

impl Classifier {
    pub fn spec(&self) -> BackboneSpec {
        self.spec
    }

    pub fn kind(&self) -> BackboneKind {
        self.spec.kind
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.dims() {
            [_, c, h, w] if *c == CHANNELS && *h == IMAGE_SIZE && *w == IMAGE_SIZE => Ok(()),
            dims => Err(Error::ShapeMismatch(format!(
                "expected N×{CHANNELS}×{IMAGE_SIZE}×{IMAGE_SIZE} input, got {dims:?}"
            ))),
        }
    }

    fn pool(features: &Tensor) -> candle_core::Result<Tensor> {
        if features.rank() == 4 {
            features.mean((2, 3))
        } else {
            Ok(features.clone())
        }
    }

    /// `N×14` logits. `train` selects batch statistics in normalization layers.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let features = self.backbone.forward_features(x, train)?;
        Ok(self.head.forward(&Self::pool(&features)?)?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, false)
    }

    /// Independent per-disease sigmoid probabilities for each image in the batch.
    pub fn predict_probabilities(&self, batch: &Tensor) -> Result<Vec<[f32; NUM_DISEASES]>> {
        let logits = self.logits(batch)?.detach();
        let probs = candle_nn::ops::sigmoid(&logits)?;
        let rows: Vec<Vec<f32>> = probs.to_dtype(DType::F32)?.to_vec2()?;
        Ok(rows
            .into_iter()
            .map(|r| {
                let mut out = [0.0; NUM_DISEASES];
                out.copy_from_slice(&r);
                out
            })
            .collect())
    }

    /// Parameters the optimizer updates, sorted by name.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("var map poisoned");
        let mut vars: Vec<_> = data
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    /// Every parameter and buffer, sorted by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let data = self.varmap.data().lock().expect("var map poisoned");
        let mut all: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        all.sort_by(|a, b| a.0.cmp(&b.0));
        all
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable_vars()
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Overwrites every parameter and buffer; all names must be present.
    pub fn load_named(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let data = self.varmap.data().lock().expect("var map poisoned");
        for (name, var) in data.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("weights lack tensor {name}")))?;
            set_var(name, var, t)?;
        }
        Ok(())
    }

    /// Overwrites a single named parameter.
    pub fn set_parameter(&self, name: &str, value: &Tensor) -> Result<()> {
        let data = self.varmap.data().lock().expect("var map poisoned");
        let var = data
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        set_var(name, var, value)
    }

    fn load_backbone_weights(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        let data = self.varmap.data().lock().expect("var map poisoned");
        for (name, var) in data.iter() {
            let Some(rest) = name.strip_prefix("backbone.") else {
                continue;
            };
            let t = tensors
                .get(rest)
                .or_else(|| tensors.get(&format!("vit.{rest}")))
                .ok_or_else(|| Error::invalid(format!("{} lacks tensor {rest}", path.display())))?;
            set_var(name, var, t)?;
        }
        Ok(())
    }

    /// Grad-CAM access to the last convolutional feature map.
    pub fn capture_cam_features(&self) -> Result<CamHook<'_>> {
        if !self.spec.kind.supports_cam() {
            return Err(Error::Unsupported(format!(
                "Grad-CAM needs a convolutional backbone; {} has no spatial feature map",
                self.spec.kind
            )));
        }
        Ok(CamHook { model: self })
    }
}

fn set_var(name: &str, var: &Var, value: &Tensor) -> Result<()> {
    if var.dims() != value.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{name}: expected {:?}, got {:?}",
            var.dims(),
            value.dims()
        )));
    }
    var.set(&value.to_dtype(var.dtype())?.to_device(var.device())?)?;
    Ok(())
}

/// Last-layer activations and their gradients for one image and one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct CamCapture {
    /// `K×h×w`, row-major.
    pub activations: Vec<f32>,
    pub gradients: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub logit: f32,
}

pub struct CamHook<'a> {
    model: &'a Classifier,
}

impl CamHook<'_> {
    /// Forward in inference mode, then backpropagate the chosen logit to the feature map.
    pub fn forward_backward(&self, image: &Tensor, disease: DiseaseLabel) -> Result<CamCapture> {
        let image = if image.rank() == 3 {
            image.unsqueeze(0)?
        } else {
            image.clone()
        };
        self.model.check_input(&image)?;
        if image.dim(0)? != 1 {
            return Err(Error::ShapeMismatch("Grad-CAM takes a single image".into()));
        }
        let features = self.model.backbone.forward_features(&image, false)?.detach();
        let features = Var::from_tensor(&features)?;
        let logits = self.model.head.forward(&Classifier::pool(features.as_tensor())?)?;
        let logit = logits.i((0, disease.index()))?;
        let grads = logit.backward()?;
        let grad = grads
            .get(features.as_tensor())
            .ok_or_else(|| Error::Unsupported("feature map received no gradient".into()))?;
        let (_, k, h, w) = features.as_tensor().dims4()?;
        Ok(CamCapture {
            activations: features.as_tensor().flatten_all()?.to_vec1()?,
            gradients: grad.flatten_all()?.to_vec1()?,
            channels: k,
            height: h,
            width: w,
            logit: logit.to_scalar()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(n: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let data: Vec<f32> = (0..n * 3 * 224 * 224)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(data, (n, 3, 224, 224), &Device::Cpu).unwrap()
    }

    #[test]
    fn tiny_shapes_and_param_budget() {
        let m = build_classifier(BackboneSpec::fresh(BackboneKind::TinyTestCnn), &BuildOptions::seeded(1)).unwrap();
        let logits = m.logits(&probe(4, 1)).unwrap();
        assert_eq!(logits.dims(), &[4, 14]);
        assert!(m.num_parameters() < 100_000);
        let probs = m.predict_probabilities(&probe(4, 2)).unwrap();
        assert!(probs.iter().flatten().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_classifier(BackboneSpec::fresh(BackboneKind::TinyTestCnn), &BuildOptions::seeded(7)).unwrap();
        let b = build_classifier(BackboneSpec::fresh(BackboneKind::TinyTestCnn), &BuildOptions::seeded(7)).unwrap();
        let c = build_classifier(BackboneSpec::fresh(BackboneKind::TinyTestCnn), &BuildOptions::seeded(8)).unwrap();
        let flat = |m: &Classifier| -> Vec<Vec<f32>> {
            m.named_tensors()
                .iter()
                .map(|(_, t)| t.flatten_all().unwrap().to_vec1().unwrap())
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn zero_head_gives_one_half() {
        let m = build_classifier(BackboneSpec::fresh(BackboneKind::TinyTestCnn), &BuildOptions::seeded(3)).unwrap();
        m.set_parameter(
            "head.weight",
            &Tensor::zeros((14, 32), DType::F32, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let probs = m.predict_probabilities(&probe(2, 5)).unwrap();
        assert!(probs.iter().flatten().all(|p| *p == 0.5));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = build_classifier(BackboneSpec::fresh(BackboneKind::TinyTestCnn), &BuildOptions::seeded(3)).unwrap();
        let bad = Tensor::zeros((1, 3, 100, 100), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.logits(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn missing_pretrained_weights_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let opts = BuildOptions {
            weights_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let err = build_classifier(BackboneSpec::pretrained(BackboneKind::Densenet121), &opts).unwrap_err();
        assert!(matches!(err, Error::PretrainedUnavailable { .. }));
        assert!(err.to_string().contains("densenet121.safetensors"));
    }

    #[test]
    fn tiny_cam_shapes_match() {
        let m = build_classifier(BackboneSpec::fresh(BackboneKind::TinyTestCnn), &BuildOptions::seeded(3)).unwrap();
        let cap = m
            .capture_cam_features()
            .unwrap()
            .forward_backward(&probe(1, 9), DiseaseLabel::Hernia)
            .unwrap();
        assert_eq!((cap.channels, cap.height, cap.width), (32, 14, 14));
        assert_eq!(cap.activations.len(), cap.gradients.len());
        assert_eq!(cap.activations.len(), 32 * 14 * 14);
    }

    #[test]
    fn backbone_names_round_trip() {
        for k in BackboneKind::ALL {
            assert_eq!(k.name().parse::<BackboneKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("vgg16".parse::<BackboneKind>().is_err());
    }
}
