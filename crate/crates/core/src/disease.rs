//! The fourteen ChestX-ray14 pathologies and the multi-hot label vector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_DISEASES: usize = 14;

/// Metadata token for an image without any pathology.
pub const NO_FINDING: &str = "No Finding";

/// One of the fourteen thoracic pathologies, in canonical (alphabetical) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DiseaseLabel {
    Atelectasis,
    Cardiomegaly,
    Consolidation,
    Edema,
    Effusion,
    Emphysema,
    Fibrosis,
    Hernia,
    Infiltration,
    Mass,
    Nodule,
    #[serde(rename = "Pleural_Thickening")]
    PleuralThickening,
    Pneumonia,
    Pneumothorax,
}

impl DiseaseLabel {
    pub const ALL: [DiseaseLabel; NUM_DISEASES] = [
        DiseaseLabel::Atelectasis,
        DiseaseLabel::Cardiomegaly,
        DiseaseLabel::Consolidation,
        DiseaseLabel::Edema,
        DiseaseLabel::Effusion,
        DiseaseLabel::Emphysema,
        DiseaseLabel::Fibrosis,
        DiseaseLabel::Hernia,
        DiseaseLabel::Infiltration,
        DiseaseLabel::Mass,
        DiseaseLabel::Nodule,
        DiseaseLabel::PleuralThickening,
        DiseaseLabel::Pneumonia,
        DiseaseLabel::Pneumothorax,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Name as spelled in the public metadata file.
    pub fn name(self) -> &'static str {
        match self {
            DiseaseLabel::Atelectasis => "Atelectasis",
            DiseaseLabel::Cardiomegaly => "Cardiomegaly",
            DiseaseLabel::Consolidation => "Consolidation",
            DiseaseLabel::Edema => "Edema",
            DiseaseLabel::Effusion => "Effusion",
            DiseaseLabel::Emphysema => "Emphysema",
            DiseaseLabel::Fibrosis => "Fibrosis",
            DiseaseLabel::Hernia => "Hernia",
            DiseaseLabel::Infiltration => "Infiltration",
            DiseaseLabel::Mass => "Mass",
            DiseaseLabel::Nodule => "Nodule",
            DiseaseLabel::PleuralThickening => "Pleural_Thickening",
            DiseaseLabel::Pneumonia => "Pneumonia",
            DiseaseLabel::Pneumothorax => "Pneumothorax",
        }
    }

    /// Canonical ordering as a single string, used in fingerprints.
    pub fn canonical_ordering() -> String {
        Self::ALL.map(Self::name).join(",")
    }
}

impl fmt::Display for DiseaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiseaseLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown disease {s:?}")))
    }
}

/// Multi-hot indicator over the fourteen diseases. "No Finding" is the
/// all-zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct LabelVector(u16);

impl LabelVector {
    pub const NONE: LabelVector = LabelVector(0);

    pub fn from_diseases(diseases: impl IntoIterator<Item = DiseaseLabel>) -> Self {
        let mut v = Self::NONE;
        for d in diseases {
            v.set(d, true);
        }
        v
    }

    /// Builds a vector from 0/1 values; anything other than exactly 0 or 1 is rejected.
    pub fn from_bits(bits: &[f32]) -> Result<Self> {
        if bits.len() != NUM_DISEASES {
            return Err(Error::ShapeMismatch(format!(
                "label vector needs {NUM_DISEASES} entries, got {}",
                bits.len()
            )));
        }
        let mut v = Self::NONE;
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0.0 => {}
                1.0 => v.0 |= 1 << i,
                other => return Err(Error::invalid(format!("label entry {other} is not binary"))),
            }
        }
        Ok(v)
    }

    pub fn get(self, disease: DiseaseLabel) -> bool {
        self.0 & (1 << disease.index()) != 0
    }

    pub fn set(&mut self, disease: DiseaseLabel, on: bool) {
        if on {
            self.0 |= 1 << disease.index();
        } else {
            self.0 &= !(1 << disease.index());
        }
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn union(self, other: LabelVector) -> LabelVector {
        LabelVector(self.0 | other.0)
    }

    pub fn diseases(self) -> impl Iterator<Item = DiseaseLabel> {
        DiseaseLabel::ALL.into_iter().filter(move |d| self.get(*d))
    }

    pub fn to_f32(self) -> [f32; NUM_DISEASES] {
        DiseaseLabel::ALL.map(|d| if self.get(d) { 1.0 } else { 0.0 })
    }

    /// Sorted, pipe-joined disease names; "No Finding" for the empty vector.
    pub fn combination_key(self) -> String {
        if self.is_empty() {
            NO_FINDING.to_string()
        } else {
            self.diseases().map(DiseaseLabel::name).collect::<Vec<_>>().join("|")
        }
    }
}
