//! Grad-CAM heatmaps and colour overlays.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};

use crate::disease::DiseaseLabel;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::transforms::{GrayImage, ImageTensor, IMAGE_SIZE};

/// Heatmap opacity at full activation.
pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub disease: DiseaseLabel,
    pub height: usize,
    pub width: usize,
    /// `height×width`, row-major, in `[0, 1]`.
    pub values: Vec<f64>,
    /// `224×224`, row-major, in `[0, 1]`.
    pub upsampled: Vec<f64>,
}

impl HeatMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.upsampled[y * IMAGE_SIZE + x]
    }

    /// Intensity-weighted centre `(x, y)` of the upsampled map, if it has any mass.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut m, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for (i, v) in self.upsampled.iter().enumerate() {
            m += v;
            cx += v * (i % IMAGE_SIZE) as f64;
            cy += v * (i / IMAGE_SIZE) as f64;
        }
        (m > 0.0).then(|| (cx / m, cy / m))
    }
}

/// `ReLU(Σ_k w_k A^k)` with `w_k` the spatial mean of the k-th gradient plane.
pub fn raw_cam(
    activations: &[f32],
    gradients: &[f32],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Vec<f64>> {
    let plane = height * width;
    if plane == 0 || channels == 0 {
        return Err(Error::ShapeMismatch("empty feature map".into()));
    }
    if activations.len() != channels * plane || gradients.len() != channels * plane {
        return Err(Error::ShapeMismatch(format!(
            "expected {channels}×{height}×{width} activations and gradients, got {} and {}",
            activations.len(),
            gradients.len()
        )));
    }
    let mut map = vec![0.0f64; plane];
    for k in 0..channels {
        let g = &gradients[k * plane..(k + 1) * plane];
        let w = g.iter().map(|v| *v as f64).sum::<f64>() / plane as f64;
        let a = &activations[k * plane..(k + 1) * plane];
        for (m, v) in map.iter_mut().zip(a) {
            *m += w * *v as f64;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    Ok(map)
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !range.is_finite() || range <= 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn upsample_bilinear(values: &[f64], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, height, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, width, out_w);
            let top = values[y0 * width + x0] * (1.0 - fx) + values[y0 * width + x1] * fx;
            let bottom = values[y1 * width + x0] * (1.0 - fx) + values[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Grad-CAM from already captured activations and gradients.
pub fn heatmap_from_arrays(
    activations: &[f32],
    gradients: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    disease: DiseaseLabel,
) -> Result<HeatMap> {
    let values = normalize_map(&raw_cam(activations, gradients, channels, height, width)?);
    let upsampled = upsample_bilinear(&values, height, width, IMAGE_SIZE, IMAGE_SIZE);
    Ok(HeatMap {
        disease,
        height,
        width,
        values,
        upsampled,
    })
}

/// Grad-CAM on the backbone's last feature map for one preprocessed image.
pub fn grad_cam(model: &Classifier, image: &ImageTensor, disease: DiseaseLabel) -> Result<HeatMap> {
    let hook = model.capture_cam_features()?;
    let cap = hook.forward_backward(&image.to_tensor(model.device())?, disease)?;
    heatmap_from_arrays(
        &cap.activations,
        &cap.gradients,
        cap.channels,
        cap.height,
        cap.width,
        disease,
    )
}

/// Jet-style colormap on `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Blends the coloured heatmap over the 224×224 grayscale image; opacity
/// scales with the heat value, so zero heat leaves a pixel untouched.
pub fn overlay(heatmap: &HeatMap, image: &GrayImage) -> Result<RgbImage> {
    if image.width() as usize != IMAGE_SIZE || image.height() as usize != IMAGE_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "overlay needs a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    if heatmap.upsampled.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::ShapeMismatch("heatmap is not 224x224".into()));
    }
    let mut out = RgbImage::new(IMAGE_SIZE as u32, IMAGE_SIZE as u32);
    for (i, (px, h)) in image.pixels().zip(&heatmap.upsampled).enumerate() {
        let g = px.0[0].clamp(0.0, 1.0) as f64;
        let a = OVERLAY_ALPHA * h;
        let c = colormap(*h);
        let blend = |k: usize| (((1.0 - a) * g + a * c[k]) * 255.0).round() as u8;
        out.put_pixel(
            (i % IMAGE_SIZE) as u32,
            (i / IMAGE_SIZE) as u32,
            Rgb([blend(0), blend(1), blend(2)]),
        );
    }
    Ok(out)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}
