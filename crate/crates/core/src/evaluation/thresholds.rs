use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::Confusion;
use super::PredictionSet;
use crate::disease::{DiseaseLabel, NUM_DISEASES};
use crate::error::{Error, Result};

/// Where a threshold set came from. Only `Validation` and `Fixed` sets may
/// be used to score a held-out split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Validation,
    Test,
    Fixed,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Validation => "validation",
            Provenance::Test => "test",
            Provenance::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub values: [f64; NUM_DISEASES],
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ThresholdFile {
    provenance: Provenance,
    thresholds: BTreeMap<String, f64>,
}

impl ThresholdSet {
    pub fn global(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
        }
        Ok(Self {
            values: [t; NUM_DISEASES],
            provenance: Provenance::Fixed,
        })
    }

    pub fn get(&self, disease: DiseaseLabel) -> f64 {
        self.values[disease.index()]
    }

    pub fn to_json(&self) -> String {
        let file = ThresholdFile {
            provenance: self.provenance,
            thresholds: DiseaseLabel::ALL
                .iter()
                .map(|d| (d.name().to_string(), self.get(*d)))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("thresholds serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ThresholdFile = serde_json::from_str(text)?;
        let mut values = [f64::NAN; NUM_DISEASES];
        for (name, t) in &file.thresholds {
            let d: DiseaseLabel = name.parse()?;
            if !(0.0..=1.0).contains(t) {
                return Err(Error::invalid(format!("threshold for {name} is {t}, outside [0, 1]")));
            }
            values[d.index()] = *t;
        }
        if let Some(d) = DiseaseLabel::ALL.iter().find(|d| values[d.index()].is_nan()) {
            return Err(Error::invalid(format!("threshold file has no entry for {d}")));
        }
        Ok(Self {
            values,
            provenance: file.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// A file path, or a bare number meaning one global threshold.
    pub fn load_or_global(arg: &str) -> Result<Self> {
        match arg.parse::<f64>() {
            Ok(t) => Self::global(t),
            Err(_) => Self::load(Path::new(arg)),
        }
    }
}

/// `0.00, 0.01, ..., 1.00`.
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("threshold grid is empty"));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("threshold grid leaves [0, 1]"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("threshold grid must be strictly increasing"));
    }
    Ok(())
}

/// Best grid value for one disease: maximal F1, ties to the smaller
/// threshold, and the largest grid value when no threshold gives F1 > 0.
pub fn tune_one(scores: &[f64], targets: &[f64], grid: &[f64]) -> Result<(f64, f64)> {
    check_grid(grid)?;
    let mut best = (grid[grid.len() - 1], 0.0);
    for &t in grid {
        let f1 = Confusion::at(scores, targets, t).f1();
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

/// Independently tuned per-disease thresholds, tagged with where the
/// predictions came from.
pub fn tune_thresholds(preds: &PredictionSet, grid: &[f64], provenance: Provenance) -> Result<ThresholdSet> {
    if preds.is_empty() {
        return Err(Error::invalid("cannot tune thresholds on an empty prediction set"));
    }
    check_grid(grid)?;
    let mut values = [0.0; NUM_DISEASES];
    for d in DiseaseLabel::ALL {
        values[d.index()] = tune_one(&preds.scores_for(d), &preds.targets_for(d), grid)?.0;
    }
    Ok(ThresholdSet { values, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_sweep() {
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
        let (t, f1) = tune_one(&[0.2, 0.6, 0.8], &[0., 1., 1.], &grid).unwrap();
        assert!((t - 0.25).abs() < 1e-12, "{t}");
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn no_positives_returns_grid_max() {
        let (t, f1) = tune_one(&[0.2, 0.6], &[0., 0.], &default_grid()).unwrap();
        assert_eq!((t, f1), (1.0, 0.0));
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(tune_one(&[0.1], &[1.], &[]).is_err());
        assert!(tune_one(&[0.1], &[1.], &[0.5, 0.2]).is_err());
        assert!(tune_one(&[0.1], &[1.], &[0.5, 1.2]).is_err());
    }

    #[test]
    fn json_round_trip_and_global_argument() {
        let mut set = ThresholdSet::global(0.3).unwrap();
        set.values[DiseaseLabel::Hernia.index()] = 0.71;
        set.provenance = Provenance::Validation;
        assert_eq!(ThresholdSet::from_json(&set.to_json()).unwrap(), set);
        let g = ThresholdSet::load_or_global("0.5").unwrap();
        assert_eq!(g.provenance, Provenance::Fixed);
        assert!(ThresholdSet::global(1.5).is_err());
        assert!(ThresholdSet::from_json(r#"{"provenance":"test","thresholds":{"Hernia":0.5}}"#).is_err());
    }
}
