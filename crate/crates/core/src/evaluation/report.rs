use std::fmt::Write as _;

use serde::Serialize;

use super::EvalReport;
use crate::disease::{DiseaseLabel, NUM_DISEASES};
use crate::error::{Error, Result};

const CHEXNET_2017: &str = include_str!("../../data/chexnet_2017_auc.csv");

/// A published per-disease AUC column shown next to our own reports.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub label: String,
    pub auc: [f64; NUM_DISEASES],
}

impl Baseline {
    pub fn chexnet_2017() -> Self {
        Self::from_csv_str("CheXNet (2017)", CHEXNET_2017).expect("bundled baseline parses")
    }

    /// `disease,auc` rows; lines starting with `#` are comments.
    pub fn from_csv_str(label: &str, text: &str) -> Result<Self> {
        let mut auc = [f64::NAN; NUM_DISEASES];
        let body: String = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .map(|l| format!("{l}\n"))
            .collect();
        let mut r = csv::Reader::from_reader(body.as_bytes());
        for rec in r.records() {
            let rec = rec?;
            let d: DiseaseLabel = rec[0].trim().parse()?;
            auc[d.index()] = rec[1]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad AUC {:?} for {d}", &rec[1])))?;
        }
        if let Some(d) = DiseaseLabel::ALL.iter().find(|d| auc[d.index()].is_nan()) {
            return Err(Error::invalid(format!("baseline has no value for {d}")));
        }
        Ok(Self {
            label: label.to_string(),
            auc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub disease: String,
    pub values: Vec<Option<f64>>,
    /// Marks the row maximum (every tied column); all false with a single column.
    pub best: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Per-disease AUC table: the baseline column (if any) followed by one
/// column per report.
pub fn render_comparison(reports: &[EvalReport], baseline: Option<&Baseline>) -> Result<Comparison> {
    let canonical: Vec<String> = DiseaseLabel::ALL.iter().map(|d| d.name().to_string()).collect();
    for r in reports {
        if r.diseases != canonical || r.auc.len() != NUM_DISEASES {
            return Err(Error::invalid(format!(
                "report {:?} does not use the canonical disease ordering",
                r.label
            )));
        }
    }
    let mut columns = Vec::new();
    if let Some(b) = baseline {
        columns.push(b.label.clone());
    }
    columns.extend(reports.iter().map(|r| r.label.clone()));
    if columns.is_empty() {
        return Err(Error::invalid("nothing to compare"));
    }

    let rows = DiseaseLabel::ALL
        .iter()
        .map(|d| {
            let mut values = Vec::with_capacity(columns.len());
            if let Some(b) = baseline {
                values.push(Some(b.auc[d.index()]));
            }
            values.extend(reports.iter().map(|r| r.auc_of(*d)));
            let max = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let best = values.iter().map(|v| columns.len() > 1 && *v == Some(max)).collect();
            ComparisonRow {
                disease: d.name().to_string(),
                values,
                best,
            }
        })
        .collect();
    Ok(Comparison { columns, rows })
}

impl Comparison {
    /// Aligned text; the row maximum carries a trailing `*`.
    pub fn to_text(&self) -> String {
        let width = self.columns.iter().map(|c| c.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<20}", "Pathology");
        for c in &self.columns {
            let _ = write!(s, " {c:>width$}");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:<20}", row.disease);
            for (v, best) in row.values.iter().zip(&row.best) {
                let cell = match v {
                    Some(v) => format!("{v:.3}{}", if *best { "*" } else { " " }),
                    None => "n/a ".to_string(),
                };
                let _ = write!(s, " {cell:>width$}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["disease".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("best".into());
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![row.disease.clone()];
            rec.extend(row.values.iter().map(|v| v.map_or(String::new(), |v| v.to_string())));
            let best: Vec<&str> = self
                .columns
                .iter()
                .zip(&row.best)
                .filter(|(_, b)| **b)
                .map(|(c, _)| c.as_str())
                .collect();
            rec.push(best.join("|"));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}
