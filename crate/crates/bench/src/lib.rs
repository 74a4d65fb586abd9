//! Seeded fixtures shared by the benchmarks.

use dacnet_core::{DiseaseLabel, LabelVector, PredictionSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores in `[0, 1]` with 0/1 targets; scores are quantized to 1/1000 so ties occur.
pub fn scored(n: usize, prevalence: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<f64> = (0..n)
        .map(|_| f64::from(u8::from(rng.random::<f64>() < prevalence)))
        .collect();
    let scores = targets
        .iter()
        .map(|y| ((0.3 * y + 0.7 * rng.random::<f64>()) * 1000.0).round() / 1000.0)
        .collect();
    (scores, targets)
}

pub fn logits_and_targets(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (rng.random_range(-10.0..10.0), f64::from(u8::from(rng.random::<bool>()))))
        .unzip()
}

/// A validation-sized prediction set over all fourteen diseases.
pub fn prediction_set(n: usize, seed: u64) -> PredictionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let labels = LabelVector::from_diseases(DiseaseLabel::ALL.into_iter().filter(|_| rng.random::<f64>() < 0.1));
        let mut row = [0.0; 14];
        for d in DiseaseLabel::ALL {
            let y = if labels.get(d) { 0.3 } else { 0.0 };
            row[d.index()] = (y + 0.7 * rng.random::<f64>()).min(1.0);
        }
        ids.push(format!("{i:08}.png"));
        scores.push(row);
        targets.push(labels);
    }
    PredictionSet::new(ids, scores, targets).expect("scores are probabilities")
}
