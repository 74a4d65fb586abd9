use crate::error::{Error, Result};

fn check_aligned(scores: &[f64], targets: &[f64]) -> Result<()> {
    if scores.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| **t != 0.0 && **t != 1.0) {
        return Err(Error::invalid(format!("target {t} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    Ok(())
}

/// Area under the ROC curve as the normalized Mann-Whitney U statistic,
/// counting tied positive/negative pairs as one half.
///
/// Returns `None` when either class is absent.
pub fn auc_roc(scores: &[f64], targets: &[f64]) -> Result<Option<f64>> {
    check_aligned(scores, targets)?;
    let n_pos = targets.iter().filter(|t| **t == 1.0).count();
    let n_neg = targets.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..=j].iter().filter(|&&k| targets[k] == 1.0).count() as u64;
        // average rank of the group is (i + 1 + j + 1) / 2
        rank_sum2 += pos_in_group * (i as u64 + j as u64 + 2);
        i = j + 1;
    }
    let p = n_pos as u64;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(Some(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Counts with the rule "positive iff score >= t".
    pub fn at(scores: &[f64], targets: &[f64], t: f64) -> Self {
        let mut c = Confusion::default();
        for (s, y) in scores.iter().zip(targets) {
            match (*s >= t, *y == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`, zero when the denominator is zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn f1_at_threshold(scores: &[f64], targets: &[f64], t: f64) -> Result<f64> {
    check_aligned(scores, targets)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
    }
    Ok(Confusion::at(scores, targets, t).f1())
}
