#![allow(dead_code)]

use dacnet_core::dataset::{make_patient_split, SplitRatios};
use dacnet_core::synthetic::{synthetic_catalog, TileImages};
use dacnet_core::training::MemorySource;
use dacnet_core::{ImageRecord, ModelRecipe, SplitManifest};

/// A small synthetic catalog, its split and the rendered images.
pub fn memory_dataset(patients: usize, seed: u64) -> (Vec<ImageRecord>, SplitManifest, MemorySource) {
    let records = synthetic_catalog(patients, 2, seed);
    let manifest = make_patient_split(&records, SplitRatios::default(), seed).unwrap();
    let tiles = TileImages::new(seed);
    let mut source = MemorySource::default();
    for (i, r) in records.iter().enumerate() {
        source.images.insert(
            r.image_id.clone(),
            tiles.render(r.labels, seed.wrapping_add(i as u64), None),
        );
    }
    (records, manifest, source)
}

pub fn tiny_recipe(max_epochs: usize) -> ModelRecipe {
    ModelRecipe {
        max_epochs,
        ..ModelRecipe::tiny_smoke()
    }
}
