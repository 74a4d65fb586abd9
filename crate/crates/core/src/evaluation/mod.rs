//! Per-disease AUC and F1, threshold tuning and comparison reports.

mod metrics;
mod report;
mod thresholds;

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{auc_roc, f1_at_threshold, Confusion};
pub use report::{render_comparison, Baseline, Comparison, ComparisonRow};
pub use thresholds::{default_grid, tune_one, tune_thresholds, Provenance, ThresholdSet};

use crate::dataset::Split;
use crate::disease::{DiseaseLabel, LabelVector, NUM_DISEASES};
use crate::error::{Error, Result};
use crate::losses::LossKind;

/// Probabilities are clamped this far from 0 and 1 before being turned
/// back into logits for the loss.
const PROB_CLAMP: f64 = 1e-7;

/// Scores and targets for a set of images, aligned row by row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    image_ids: Vec<String>,
    scores: Vec<[f64; NUM_DISEASES]>,
    targets: Vec<LabelVector>,
}

impl PredictionSet {
    pub fn new(image_ids: Vec<String>, scores: Vec<[f64; NUM_DISEASES]>, targets: Vec<LabelVector>) -> Result<Self> {
        if image_ids.len() != scores.len() || scores.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids, {} score rows, {} target rows",
                image_ids.len(),
                scores.len(),
                targets.len()
            )));
        }
        for (id, row) in image_ids.iter().zip(&scores) {
            if row.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::invalid(format!("{id}: score outside [0, 1]")));
            }
        }
        Ok(Self {
            image_ids,
            scores,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn scores(&self) -> &[[f64; NUM_DISEASES]] {
        &self.scores
    }

    pub fn targets(&self) -> &[LabelVector] {
        &self.targets
    }

    pub fn scores_for(&self, d: DiseaseLabel) -> Vec<f64> {
        self.scores.iter().map(|r| r[d.index()]).collect()
    }

    pub fn targets_for(&self, d: DiseaseLabel) -> Vec<f64> {
        self.targets.iter().map(|t| t.get(d) as u8 as f64).collect()
    }

    fn header() -> Vec<String> {
        let mut h = vec!["image_id".to_string()];
        h.extend(DiseaseLabel::ALL.iter().map(|d| format!("score_{d}")));
        h.extend(DiseaseLabel::ALL.iter().map(|d| format!("target_{d}")));
        h
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header())?;
        for ((id, s), t) in self.image_ids.iter().zip(&self.scores).zip(&self.targets) {
            let mut rec = vec![id.clone()];
            rec.extend(s.iter().map(|v| v.to_string()));
            rec.extend(t.to_f32().iter().map(|v| (*v as u8).to_string()));
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io("<predictions>", e))?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(f))
    }

    pub fn read_csv_from<R: Read>(input: R, path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != Self::header() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: 1,
                message: "header does not match the canonical disease ordering".into(),
            });
        }
        let (mut ids, mut scores, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |message: String| Error::Malformed {
                path: path.to_path_buf(),
                line,
                message,
            };
            let mut nums = [0.0f64; 2 * NUM_DISEASES];
            for (k, v) in nums.iter_mut().enumerate() {
                *v = rec[k + 1]
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad number {:?}", &rec[k + 1])))?;
            }
            let mut row = [0.0; NUM_DISEASES];
            row.copy_from_slice(&nums[..NUM_DISEASES]);
            let bits: Vec<f32> = nums[NUM_DISEASES..].iter().map(|v| *v as f32).collect();
            ids.push(rec[0].to_string());
            scores.push(row);
            targets.push(LabelVector::from_bits(&bits).map_err(|e| bad(e.to_string()))?);
        }
        Self::new(ids, scores, targets)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv_from(std::io::BufReader::new(f), path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub split: Split,
    pub n_images: usize,
    pub diseases: Vec<String>,
    /// `None` where the split lacks positives or negatives for the disease.
    pub auc: Vec<Option<f64>>,
    pub f1: Vec<f64>,
    /// Mean over diseases with a defined AUC.
    pub macro_auc: Option<f64>,
    /// Mean over all 14 diseases.
    pub macro_f1: f64,
    pub loss: f64,
    pub thresholds: Vec<f64>,
    pub threshold_provenance: Provenance,
}

impl EvalReport {
    pub fn auc_of(&self, d: DiseaseLabel) -> Option<f64> {
        self.auc[d.index()]
    }

    pub fn f1_of(&self, d: DiseaseLabel) -> f64 {
        self.f1[d.index()]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} on {} ({} images, thresholds: {})",
            self.label, self.split, self.n_images, self.threshold_provenance
        );
        let _ = writeln!(s, "{:<20} {:>7} {:>7} {:>9}", "Disease", "AUC", "F1", "Threshold");
        for (i, name) in self.diseases.iter().enumerate() {
            let auc = self.auc[i].map_or("n/a".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(s, "{name:<20} {auc:>7} {:>7.4} {:>9.2}", self.f1[i], self.thresholds[i]);
        }
        let macro_auc = self.macro_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(s, "{:<20} {macro_auc:>7} {:>7.4}", "Macro average", self.macro_f1);
        let _ = writeln!(s, "Loss {:.4}", self.loss);
        s
    }
}

/// Mean loss of the given kind, recomputed from stored probabilities.
pub fn loss_from_probabilities(preds: &PredictionSet, loss: LossKind) -> Result<f64> {
    let mut logits = Vec::with_capacity(preds.len() * NUM_DISEASES);
    let mut targets = Vec::with_capacity(preds.len() * NUM_DISEASES);
    for (row, t) in preds.scores.iter().zip(&preds.targets) {
        for (p, y) in row.iter().zip(t.to_f32()) {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            logits.push(p.ln() - (1.0 - p).ln());
            targets.push(y as f64);
        }
    }
    loss.loss(&logits, &targets)
}

/// Scores a prediction set. Thresholds fitted on the test split are refused.
pub fn evaluate(
    preds: &PredictionSet,
    thresholds: &ThresholdSet,
    loss: LossKind,
    label: &str,
    split: Split,
) -> Result<EvalReport> {
    if thresholds.provenance == Provenance::Test {
        return Err(Error::Leakage(
            "thresholds were fitted on the test split; refit them on validation predictions".into(),
        ));
    }
    if preds.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    let mut auc = Vec::with_capacity(NUM_DISEASES);
    let mut f1 = Vec::with_capacity(NUM_DISEASES);
    for d in DiseaseLabel::ALL {
        let (s, y) = (preds.scores_for(d), preds.targets_for(d));
        let a = auc_roc(&s, &y)?;
        if a.is_none() {
            log::warn!("AUC undefined for {d} on {split}: only one class present; left out of the macro average");
        }
        auc.push(a);
        f1.push(f1_at_threshold(&s, &y, thresholds.get(d))?);
    }
    let defined: Vec<f64> = auc.iter().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let macro_f1 = f1.iter().sum::<f64>() / NUM_DISEASES as f64;
    Ok(EvalReport {
        label: label.to_string(),
        split,
        n_images: preds.len(),
        diseases: DiseaseLabel::ALL.iter().map(|d| d.name().to_string()).collect(),
        auc,
        f1,
        macro_auc,
        macro_f1,
        loss: loss_from_probabilities(preds, loss)?,
        thresholds: thresholds.values.to_vec(),
        threshold_provenance: thresholds.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perfect(n: usize) -> PredictionSet {
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n {
            let lv = LabelVector::from_diseases(DiseaseLabel::ALL.into_iter().filter(|d| (i + d.index()) % 3 == 0));
            let row = lv.to_f32().map(|v| v as f64);
            ids.push(format!("{i:05}.png"));
            scores.push(row);
            targets.push(lv);
        }
        PredictionSet::new(ids, scores, targets).unwrap()
    }

    #[test]
    fn perfect_scores_give_unit_metrics() {
        let p = perfect(12);
        let r = evaluate(
            &p,
            &ThresholdSet::global(0.5).unwrap(),
            LossKind::Bce,
            "oracle",
            Split::Test,
        )
        .unwrap();
        assert!(r.auc.iter().all(|a| *a == Some(1.0)));
        assert!(r.f1.iter().all(|f| *f == 1.0));
        assert_eq!(r.macro_auc, Some(1.0));
        assert!(r.loss < 1e-6);
    }

    #[test]
    fn test_fitted_thresholds_refused() {
        let p = perfect(6);
        let mut t = ThresholdSet::global(0.5).unwrap();
        t.provenance = Provenance::Test;
        let err = evaluate(&p, &t, LossKind::Bce, "x", Split::Test).unwrap_err();
        assert!(matches!(err, Error::Leakage(_)));
    }

    #[test]
    fn macro_values_are_plain_means() {
        let p = perfect(9);
        let r = evaluate(&p, &ThresholdSet::global(0.9).unwrap(), LossKind::Bce, "x", Split::Val).unwrap();
        let f: f64 = r.f1.iter().sum::<f64>() / 14.0;
        assert_eq!(r.macro_f1, f);
        let a: Vec<f64> = r.auc.iter().flatten().copied().collect();
        assert_eq!(r.macro_auc.unwrap(), a.iter().sum::<f64>() / a.len() as f64);
    }

    #[test]
    fn prediction_csv_round_trip() {
        let p = perfect(5);
        let mut buf = Vec::new();
        p.write_csv_to(&mut buf).unwrap();
        let back = PredictionSet::read_csv_from(buf.as_slice(), Path::new("p.csv")).unwrap();
        assert_eq!(back, p);
        let bad = String::from_utf8(buf)
            .unwrap()
            .replacen("score_Atelectasis", "score_X", 1);
        assert!(PredictionSet::read_csv_from(bad.as_bytes(), Path::new("p.csv")).is_err());
    }

    #[test]
    fn scores_must_be_probabilities() {
        let err = PredictionSet::new(vec!["a".into()], vec![[1.5; NUM_DISEASES]], vec![LabelVector::NONE]);
        assert!(err.is_err());
    }
}
