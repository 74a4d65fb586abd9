//! Image preprocessing and seeded augmentation.
//!
//! Every pipeline ends in a normalized `3×224×224` array. X-rays are
//! decoded as single-channel luminance and replicated to three channels so
//! that ImageNet-pretrained backbones can consume them.

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
pub const CHANNELS: usize = 3;

/// Luminance image with values in `[0, 1]`.
pub type GrayImage = ImageBuffer<Luma<f32>, Vec<f32>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResizePolicy {
    FixedResize224,
    RandomResizedCrop224 {
        /// Fraction of the source area kept by the crop.
        scale: (f64, f64),
        /// Width/height aspect ratio range of the crop.
        ratio: (f64, f64),
    },
}

impl ResizePolicy {
    pub fn random_resized_crop() -> Self {
        ResizePolicy::RandomResizedCrop224 {
            scale: (0.7, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

/// Jitter ranges; a factor is drawn from `[max(0, 1 - r), 1 + r]`.
///
/// Saturation and hue are accepted for completeness but have no effect on
/// replicated grayscale input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    #[serde(default)]
    pub saturation: f64,
    #[serde(default)]
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.0,
            hue: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IMAGENET
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub resize: ResizePolicy,
    pub horizontal_flip_prob: f64,
    #[serde(default)]
    pub color_jitter: Option<ColorJitter>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl TransformSpec {
    /// Fixed 224 resize with random horizontal flip.
    pub fn resize_and_flip() -> Self {
        Self {
            resize: ResizePolicy::FixedResize224,
            horizontal_flip_prob: 0.5,
            color_jitter: None,
            normalization: Normalization::IMAGENET,
        }
    }

    /// Random resized crop, horizontal flip and brightness/contrast jitter.
    pub fn crop_flip_jitter() -> Self {
        Self {
            resize: ResizePolicy::random_resized_crop(),
            horizontal_flip_prob: 0.5,
            color_jitter: Some(ColorJitter::default()),
            normalization: Normalization::IMAGENET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::invalid(format!(
                "horizontal_flip_prob {} outside [0, 1]",
                self.horizontal_flip_prob
            )));
        }
        if let Some(j) = &self.color_jitter {
            if [j.brightness, j.contrast, j.saturation, j.hue]
                .iter()
                .any(|v| !v.is_finite() || *v < 0.0)
            {
                return Err(Error::invalid("color jitter ranges must be non-negative"));
            }
        }
        if let ResizePolicy::RandomResizedCrop224 { scale, ratio } = self.resize {
            if !(0.0 < scale.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
                return Err(Error::invalid(format!("bad crop scale range {scale:?}")));
            }
            if !(0.0 < ratio.0 && ratio.0 <= ratio.1) {
                return Err(Error::invalid(format!("bad crop ratio range {ratio:?}")));
            }
        }
        if self.normalization.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::invalid("normalization std must be positive"));
        }
        Ok(())
    }
}

/// A normalized `3×224×224` image in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Vec<f32>,
}

impl ImageTensor {
    pub const LEN: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::ShapeMismatch(format!(
                "image tensor needs {} values, got {}",
                Self::LEN,
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [CHANNELS, IMAGE_SIZE, IMAGE_SIZE]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * IMAGE_SIZE + y) * IMAGE_SIZE + x]
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
            device,
        )?)
    }

    /// Stacks images into an `N×3×224×224` batch.
    pub fn stack(images: &[ImageTensor], device: &Device) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(images.len() * Self::LEN);
        for img in images {
            flat.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(
            flat,
            (images.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
            device,
        )?)
    }

    pub fn denormalize(&self, norm: &Normalization) -> ImageTensor {
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / plane;
                v * norm.std[c] + norm.mean[c]
            })
            .collect();
        ImageTensor { data }
    }
}

/// Replicates a 224×224 luminance image to three channels and normalizes it.
pub fn normalize(gray: &GrayImage, norm: &Normalization) -> Result<ImageTensor> {
    if gray.width() as usize != IMAGE_SIZE || gray.height() as usize != IMAGE_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}",
            gray.width(),
            gray.height()
        )));
    }
    let mut data = Vec::with_capacity(ImageTensor::LEN);
    for c in 0..CHANNELS {
        let (m, s) = (norm.mean[c], norm.std[c]);
        data.extend(gray.as_raw().iter().map(|v| (v - m) / s));
    }
    Ok(ImageTensor { data })
}

/// Decodes any supported format to luminance in `[0, 1]`.
pub fn decode_image(bytes: &[u8], image_id: &str) -> Result<GrayImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::ImageDecode {
        image_id: image_id.to_string(),
        reason: e.to_string(),
    })?;
    Ok(img.to_luma32f())
}

pub fn load_image(path: &std::path::Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, &path.display().to_string())
}

fn resize_to_model(img: &GrayImage) -> GrayImage {
    let s = IMAGE_SIZE as u32;
    if img.width() == s && img.height() == s {
        img.clone()
    } else {
        imageops::resize(img, s, s, FilterType::Triangle)
    }
}

/// Crop box `(x, y, w, h)` drawn as in torchvision's RandomResizedCrop:
/// ten attempts at a (scale, log-ratio) sample, then a center crop fallback.
fn sample_crop(
    width: u32,
    height: u32,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (u32, u32, u32, u32) {
    let area = (width * height) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * aspect).sqrt().round() as u32;
        let h = (target / aspect).sqrt().round() as u32;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return (x, y, w, h);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 {
        (width, (width as f64 / ratio.0).round() as u32)
    } else if in_ratio > ratio.1 {
        ((height as f64 * ratio.1).round() as u32, height)
    } else {
        (width, height)
    };
    ((width - w) / 2, (height - h) / 2, w, h)
}

fn apply_jitter(img: &mut GrayImage, jitter: &ColorJitter, rng: &mut ChaCha8Rng) {
    let mut factor = |r: f64| {
        if r == 0.0 {
            1.0
        } else {
            rng.random_range((1.0 - r).max(0.0)..=1.0 + r) as f32
        }
    };
    let brightness = factor(jitter.brightness);
    let contrast = factor(jitter.contrast);
    for v in img.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let mean = img.iter().sum::<f32>() / img.len().max(1) as f32;
    for v in img.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
}

/// Seeded augmentation pipeline for training.
#[derive(Debug, Clone)]
pub struct TrainTransform {
    spec: TransformSpec,
    seed: u64,
}

pub fn build_train_transform(spec: &TransformSpec, seed: u64) -> Result<TrainTransform> {
    spec.validate()?;
    Ok(TrainTransform {
        spec: spec.clone(),
        seed,
    })
}

impl TrainTransform {
    pub fn spec(&self) -> &TransformSpec {
        &self.spec
    }

    /// Augments with the pipeline's own seed.
    pub fn apply(&self, img: &GrayImage) -> Result<ImageTensor> {
        self.apply_seeded(img, self.seed)
    }

    /// Augments with an explicit per-sample seed (see [`sample_seed`]).
    pub fn apply_seeded(&self, img: &GrayImage, seed: u64) -> Result<ImageTensor> {
        let gray = self.augment_gray(img, seed)?;
        normalize(&gray, &self.spec.normalization)
    }

    pub fn apply_bytes(&self, bytes: &[u8], image_id: &str, seed: u64) -> Result<ImageTensor> {
        self.apply_seeded(&decode_image(bytes, image_id)?, seed)
    }

    /// Everything up to (not including) normalization.
    pub fn augment_gray(&self, img: &GrayImage, seed: u64) -> Result<GrayImage> {
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::invalid("empty image"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = match self.spec.resize {
            ResizePolicy::FixedResize224 => resize_to_model(img),
            ResizePolicy::RandomResizedCrop224 { scale, ratio } => {
                let (x, y, w, h) = sample_crop(img.width(), img.height(), scale, ratio, &mut rng);
                let cropped = imageops::crop_imm(img, x, y, w, h).to_image();
                resize_to_model(&cropped)
            }
        };
        // always draw so that flip_prob does not shift later draws
        let flip_draw: f64 = rng.random();
        if flip_draw < self.spec.horizontal_flip_prob {
            imageops::flip_horizontal_in_place(&mut out);
        }
        if let Some(j) = &self.spec.color_jitter {
            apply_jitter(&mut out, j, &mut rng);
        }
        Ok(out)
    }
}

/// Deterministic resize + normalize.
#[derive(Debug, Clone)]
pub struct EvalTransform {
    normalization: Normalization,
}

pub fn build_eval_transform(spec: &TransformSpec) -> Result<EvalTransform> {
    spec.validate()?;
    Ok(EvalTransform {
        normalization: spec.normalization,
    })
}

impl EvalTransform {
    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn apply(&self, img: &GrayImage) -> Result<ImageTensor> {
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::invalid("empty image"));
        }
        normalize(&resize_to_model(img), &self.normalization)
    }

    pub fn apply_bytes(&self, bytes: &[u8], image_id: &str) -> Result<ImageTensor> {
        self.apply(&decode_image(bytes, image_id)?)
    }

    /// The resized, un-normalized luminance the model sees (used for overlays).
    pub fn resized_gray(&self, img: &GrayImage) -> GrayImage {
        resize_to_model(img)
    }
}

/// Mixes a base seed with stream indices (e.g. epoch and sample index).
///
/// Seeds depend only on the indices, never on which worker loads a sample,
/// so parallel loading is reproducible for any worker count.
pub fn sample_seed(base: u64, streams: &[u64]) -> u64 {
    let mut x = base;
    for s in streams {
        x = splitmix64(x ^ splitmix64(*s));
    }
    x
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
