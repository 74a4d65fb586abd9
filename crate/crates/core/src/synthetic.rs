//! Deterministic synthetic data for smoke tests and demos.
//!
//! Images are a 56×56 mosaic of 4×4 tiles on a noisy mid-gray background.
//! Each disease owns a fixed binary tile pattern; an image showing a
//! disease carries a fixed number of that disease's tiles at seeded random
//! positions, optionally confined to one quadrant.

use std::fs;
use std::path::Path;

use image::Luma;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Gender, ImageRecord, METADATA_FILE};
use crate::disease::{DiseaseLabel, LabelVector, NUM_DISEASES};
use crate::error::{Error, Result};
use crate::transforms::{GrayImage, IMAGE_SIZE};

const TILE: usize = 4;
const GRID: usize = IMAGE_SIZE / TILE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    /// Tile-grid bounds `(x0, y0, x1, y1)`, exclusive ends.
    fn bounds(self) -> (usize, usize, usize, usize) {
        let h = GRID / 2;
        match self {
            Quadrant::TopLeft => (0, 0, h, h),
            Quadrant::TopRight => (h, 0, GRID, h),
            Quadrant::BottomLeft => (0, h, h, GRID),
            Quadrant::BottomRight => (h, h, GRID, GRID),
        }
    }

    /// Whether pixel `(x, y)` of a 224×224 image lies in this quadrant.
    pub fn contains(self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.bounds();
        let s = TILE as f64;
        x >= x0 as f64 * s && x < x1 as f64 * s && y >= y0 as f64 * s && y < y1 as f64 * s
    }
}

#[derive(Debug, Clone)]
pub struct TileImages {
    patterns: [[f32; TILE * TILE]; NUM_DISEASES],
    /// Tiles drawn per present disease.
    pub tiles_per_disease: usize,
    pub noise: f32,
}

impl TileImages {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut patterns = [[0.0; TILE * TILE]; NUM_DISEASES];
        let mut used = Vec::new();
        for p in patterns.iter_mut() {
            loop {
                let bits: u16 = rng.random();
                // balanced patterns with no repeats keep the tiles easy to tell apart
                if bits.count_ones() == 8 && !used.contains(&bits) {
                    used.push(bits);
                    for (i, v) in p.iter_mut().enumerate() {
                        *v = if bits >> i & 1 == 1 { 0.95 } else { 0.05 };
                    }
                    break;
                }
            }
        }
        Self {
            patterns,
            tiles_per_disease: 160,
            noise: 0.05,
        }
    }

    pub fn render(&self, labels: LabelVector, seed: u64, region: Option<Quadrant>) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = GrayImage::from_fn(IMAGE_SIZE as u32, IMAGE_SIZE as u32, |_, _| {
            Luma([0.5 + rng.random_range(-self.noise..=self.noise)])
        });
        let (x0, y0, x1, y1) = region.map_or((0, 0, GRID, GRID), Quadrant::bounds);
        let mut cells: Vec<(usize, usize)> = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).collect();
        cells.shuffle(&mut rng);
        let mut cells = cells.into_iter();
        for d in labels.diseases() {
            for (tx, ty) in cells.by_ref().take(self.tiles_per_disease) {
                let p = &self.patterns[d.index()];
                for dy in 0..TILE {
                    for dx in 0..TILE {
                        let (x, y) = ((tx * TILE + dx) as u32, (ty * TILE + dy) as u32);
                        img.put_pixel(x, y, Luma([p[dy * TILE + dx]]));
                    }
                }
            }
        }
        img
    }
}

/// Per-disease prevalence falling geometrically from 30% to about 1%.
pub fn skewed_prevalence() -> [f64; NUM_DISEASES] {
    let mut p = [0.0; NUM_DISEASES];
    for (i, v) in p.iter_mut().enumerate() {
        *v = 0.30 * 0.77f64.powi(i as i32);
    }
    p
}

/// Patients with one to `max_images` images each; a patient's images share
/// a condition set, each finding dropping out of a follow-up image with
/// probability 0.2.
pub fn synthetic_catalog(n_patients: usize, max_images: usize, seed: u64) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prevalence = skewed_prevalence();
    // shuffle which disease gets which prevalence so rarity is not alphabetical
    let mut order = DiseaseLabel::ALL;
    order.shuffle(&mut rng);
    let mut records = Vec::new();
    for p in 0..n_patients {
        let conditions = LabelVector::from_diseases(
            order
                .iter()
                .zip(prevalence)
                .filter_map(|(d, q)| (rng.random::<f64>() < q).then_some(*d)),
        );
        let n = rng.random_range(1..=max_images.max(1));
        let age = rng.random_range(20..90u32);
        let gender = if rng.random::<bool>() { Gender::M } else { Gender::F };
        for k in 0..n {
            let labels = if k == 0 {
                conditions
            } else {
                LabelVector::from_diseases(conditions.diseases().filter(|_| rng.random::<f64>() >= 0.2))
            };
            records.push(ImageRecord {
                image_id: format!("{:08}_{:03}.png", p + 1, k),
                patient_id: format!("{}", p + 1),
                labels,
                age: Some(age),
                gender: Some(gender),
            });
        }
    }
    records
}

/// Writes the metadata table ([`METADATA_FILE`]) in the public column layout
/// plus one PNG per record under `images/`.
pub fn write_dataset(dir: &Path, records: &[ImageRecord], images: &TileImages, seed: u64) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let meta = dir.join(METADATA_FILE);
    let mut w = csv::Writer::from_path(&meta)?;
    w.write_record([
        "Image Index",
        "Finding Labels",
        "Follow-up #",
        "Patient ID",
        "Patient Age",
        "Patient Gender",
    ])?;
    for (i, r) in records.iter().enumerate() {
        let age = r.age.map_or(String::new(), |a| a.to_string());
        let gender = match r.gender {
            Some(Gender::M) => "M",
            Some(Gender::F) => "F",
            None => "",
        };
        w.write_record([
            r.image_id.as_str(),
            &r.labels.combination_key(),
            "0",
            &r.patient_id,
            &age,
            gender,
        ])?;
        let img = images.render(r.labels, seed ^ (i as u64).wrapping_mul(0x9E37_79B9), None);
        let gray8 = image::GrayImage::from_fn(img.width(), img.height(), |x, y| {
            Luma([(img.get_pixel(x, y).0[0].clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let path = img_dir.join(&r.image_id);
        gray8.save(&path)?;
    }
    w.flush().map_err(|e| Error::io(&meta, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let t = TileImages::new(1);
        let l = LabelVector::from_diseases([DiseaseLabel::Hernia, DiseaseLabel::Mass]);
        assert_eq!(t.render(l, 5, None), t.render(l, 5, None));
        assert_ne!(t.render(l, 5, None), t.render(l, 6, None));
    }

    #[test]
    fn quadrant_confines_tiles() {
        let t = TileImages {
            noise: 0.0,
            ..TileImages::new(1)
        };
        let img = t.render(
            LabelVector::from_diseases([DiseaseLabel::Edema]),
            3,
            Some(Quadrant::BottomRight),
        );
        for (x, y, p) in img.enumerate_pixels() {
            if p.0[0] != 0.5 {
                assert!(Quadrant::BottomRight.contains(x as f64, y as f64));
            }
        }
    }

    #[test]
    fn catalog_shape() {
        let c = synthetic_catalog(50, 3, 9);
        assert!(c.len() >= 50 && c.len() <= 150);
        assert_eq!(c, synthetic_catalog(50, 3, 9));
    }
}
