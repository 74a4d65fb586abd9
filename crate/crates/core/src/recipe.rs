//! Training recipes: the three shipped presets and their TOML form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::disease::DiseaseLabel;
use crate::error::{Error, Result};
use crate::losses::{FocalParams, LossKind};
use crate::models::{BackboneKind, BackboneSpec};
use crate::optim::{OptimizerSpec, SchedulerSpec};
use crate::transforms::TransformSpec;

pub const PRESET_NAMES: [&str; 3] = ["replicate_chexnet", "dacnet", "vit_transformer"];

pub const DEFAULT_SEED: u64 = 17;

/// How decisions are taken from probabilities at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Global {
        threshold: f64,
    },
    /// One threshold per disease, tuned for F1 on the validation split.
    PerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecipe {
    pub name: String,
    pub backbone: BackboneSpec,
    pub loss: LossKind,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub scheduler: SchedulerSpec,
    pub transform: TransformSpec,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub thresholds: ThresholdPolicy,
}

impl ModelRecipe {
    pub fn replicate_chexnet() -> Self {
        Self {
            name: "replicate_chexnet".into(),
            backbone: BackboneSpec::pretrained(BackboneKind::Densenet121),
            loss: LossKind::Bce,
            optimizer: OptimizerSpec::Adam { lr: 1e-3 },
            scheduler: SchedulerSpec::None,
            transform: TransformSpec::resize_and_flip(),
            batch_size: 32,
            max_epochs: 25,
            early_stop_patience: 5,
            seed: DEFAULT_SEED,
            thresholds: ThresholdPolicy::Global { threshold: 0.5 },
        }
    }

    pub fn dacnet() -> Self {
        Self {
            name: "dacnet".into(),
            backbone: BackboneSpec::pretrained(BackboneKind::Densenet121),
            loss: LossKind::Focal(FocalParams::default()),
            optimizer: OptimizerSpec::AdamW {
                lr: 5e-5,
                weight_decay: 0.01,
            },
            scheduler: SchedulerSpec::ReduceOnPlateau {
                factor: 0.1,
                patience: 2,
            },
            transform: TransformSpec::crop_flip_jitter(),
            batch_size: 32,
            max_epochs: 25,
            early_stop_patience: 5,
            seed: DEFAULT_SEED,
            thresholds: ThresholdPolicy::PerClass,
        }
    }

    pub fn vit_transformer() -> Self {
        Self {
            name: "vit_transformer".into(),
            backbone: BackboneSpec::pretrained(BackboneKind::VitBasePatch16),
            loss: LossKind::Bce,
            optimizer: OptimizerSpec::AdamW {
                lr: 1e-4,
                weight_decay: 0.01,
            },
            scheduler: SchedulerSpec::None,
            transform: TransformSpec::resize_and_flip(),
            batch_size: 32,
            max_epochs: 25,
            early_stop_patience: 5,
            seed: DEFAULT_SEED,
            thresholds: ThresholdPolicy::Global { threshold: 0.5 },
        }
    }

    /// Small CNN, plain BCE and no augmentation. Trains in seconds on a CPU;
    /// meant for smoke tests and synthetic data, not for real radiographs.
    pub fn tiny_smoke() -> Self {
        Self {
            name: "tiny_smoke".into(),
            backbone: BackboneSpec::fresh(BackboneKind::TinyTestCnn),
            loss: LossKind::Bce,
            optimizer: OptimizerSpec::Adam { lr: 3e-3 },
            scheduler: SchedulerSpec::None,
            transform: TransformSpec {
                horizontal_flip_prob: 0.0,
                ..TransformSpec::resize_and_flip()
            },
            batch_size: 8,
            max_epochs: 3,
            early_stop_patience: 5,
            seed: DEFAULT_SEED,
            thresholds: ThresholdPolicy::Global { threshold: 0.5 },
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "replicate_chexnet" => Some(Self::replicate_chexnet()),
            "dacnet" => Some(Self::dacnet()),
            "vit_transformer" => Some(Self::vit_transformer()),
            "tiny_smoke" => Some(Self::tiny_smoke()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Recipe("recipe name is empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Recipe("batch_size must be positive".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Recipe("early_stop_patience must be positive".into()));
        }
        if let ThresholdPolicy::Global { threshold } = self.thresholds {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::Recipe(format!("global threshold {threshold} outside [0, 1]")));
            }
        }
        self.loss.validate().map_err(|e| Error::Recipe(e.to_string()))?;
        self.optimizer.validate()?;
        self.scheduler.validate()?;
        self.transform.validate().map_err(|e| Error::Recipe(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let recipe: Self = toml::from_str(text).map_err(|e| Error::Recipe(e.to_string()))?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("recipe serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Recipe(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Hash of everything that shapes the training trajectory plus the
    /// disease ordering. `max_epochs` is left out so a run can be extended.
    pub fn fingerprint(&self) -> String {
        fingerprint_with_ordering(self, &DiseaseLabel::canonical_ordering())
    }
}

pub(crate) fn fingerprint_with_ordering(recipe: &ModelRecipe, ordering: &str) -> String {
    let mut canonical = recipe.clone();
    canonical.max_epochs = 0;
    let json = serde_json::to_string(&canonical).expect("recipe serializes to JSON");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    h.update(b"\n");
    h.update(ordering.as_bytes());
    hex::encode(h.finalize())
}
