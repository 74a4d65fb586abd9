//! Single-file checkpoints: model weights, optimizer moments and run state
//! in one safetensors file, with the recipe and its fingerprint in the
//! header metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::disease::DiseaseLabel;
use crate::error::{Error, Result};
use crate::models::{build_classifier, BackboneSpec, BuildOptions, Classifier};
use crate::recipe::{fingerprint_with_ordering, ModelRecipe};
use crate::training::TrainState;

const OPTIM_PREFIX: &str = "optim.";
const KEY_FINGERPRINT: &str = "dacnet.fingerprint";
const KEY_DISEASES: &str = "dacnet.diseases";
const KEY_RECIPE: &str = "dacnet.recipe";
const KEY_STATE: &str = "dacnet.state";
const KEY_VERSION: &str = "dacnet.version";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub recipe: ModelRecipe,
    pub fingerprint: String,
    /// Disease names in the order of the model's outputs.
    pub diseases: Vec<String>,
    pub state: TrainState,
    pub weights: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
    pub version: String,
}

impl Checkpoint {
    pub fn new(
        recipe: &ModelRecipe,
        state: TrainState,
        weights: impl IntoIterator<Item = (String, Tensor)>,
        optimizer: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Self {
        Self {
            recipe: recipe.clone(),
            fingerprint: recipe.fingerprint(),
            diseases: DiseaseLabel::ALL.iter().map(|d| d.name().to_string()).collect(),
            state,
            weights: weights.into_iter().collect(),
            optimizer: optimizer.into_iter().collect(),
            version: crate::VERSION.to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert(KEY_FINGERPRINT.to_string(), self.fingerprint.clone());
        meta.insert(KEY_DISEASES.to_string(), self.diseases.join(","));
        meta.insert(KEY_RECIPE.to_string(), self.recipe.to_toml_string());
        meta.insert(KEY_STATE.to_string(), serde_json::to_string(&self.state)?);
        meta.insert(KEY_VERSION.to_string(), self.version.clone());
        let mut all: Vec<(&str, &Tensor)> = self
            .weights
            .iter()
            .chain(self.optimizer.iter())
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        all.sort_by(|a, b| a.0.cmp(b.0));
        // write then rename, so a crash never leaves a truncated checkpoint behind
        let tmp = path.with_extension("ckpt.partial");
        safetensors::serialize_to_file(all, Some(meta), &tmp)
            .map_err(|e| Error::invalid(format!("writing {}: {e}", path.display())))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: 0,
            message,
        };
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("not a dacnet checkpoint (no metadata)".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| bad(format!("metadata field {k} missing")))
        };
        let recipe = ModelRecipe::from_toml_str(&field(KEY_RECIPE)?)?;
        let state: TrainState = serde_json::from_str(&field(KEY_STATE)?)?;
        let diseases = field(KEY_DISEASES)?.split(',').map(str::to_string).collect();
        let mut weights = HashMap::new();
        let mut optimizer = HashMap::new();
        for (name, t) in candle_core::safetensors::load_buffer(&bytes, device)? {
            if name.starts_with(OPTIM_PREFIX) {
                optimizer.insert(name, t);
            } else {
                weights.insert(name, t);
            }
        }
        Ok(Self {
            recipe,
            fingerprint: field(KEY_FINGERPRINT)?,
            diseases,
            state,
            weights,
            optimizer,
            version: field(KEY_VERSION)?,
        })
    }

    /// Checks that the checkpoint was produced by `recipe` (ignoring
    /// `max_epochs`) with this build's disease ordering.
    pub fn verify(&self, recipe: &ModelRecipe) -> Result<()> {
        let ordering = self.diseases.join(",");
        if ordering != DiseaseLabel::canonical_ordering() {
            return Err(Error::FingerprintMismatch {
                expected: recipe.fingerprint(),
                found: fingerprint_with_ordering(&self.recipe, &ordering),
            });
        }
        let stored = fingerprint_with_ordering(&self.recipe, &ordering);
        if stored != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: stored,
                found: self.fingerprint.clone(),
            });
        }
        let expected = recipe.fingerprint();
        if expected != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Rebuilds the classifier with the stored weights.
    pub fn build_model(&self, device: &Device) -> Result<Classifier> {
        self.verify(&self.recipe)?;
        let opts = BuildOptions {
            init_seed: self.recipe.seed,
            weights_dir: None,
            device: device.clone(),
        };
        let model = build_classifier(BackboneSpec::fresh(self.recipe.backbone.kind), &opts)?;
        model.load_named(&self.weights)?;
        Ok(model)
    }
}
