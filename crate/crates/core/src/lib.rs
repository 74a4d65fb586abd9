//! Multi-label chest X-ray disease classification.
//!
//! The crate covers the whole offline pipeline for the NIH ChestX-ray14
//! data: metadata parsing and patient-wise splits ([`dataset`]), image
//! preprocessing ([`transforms`]), backbones with a 14-way head
//! ([`models`]), BCE and focal losses ([`losses`]), recipe-driven training
//! ([`training`]), per-disease AUC/F1 with per-class threshold tuning
//! ([`evaluation`]) and Grad-CAM heatmaps ([`explain`]).

pub mod checkpoint;
pub mod dataset;
pub mod disease;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod losses;
pub mod models;
pub mod optim;
pub mod recipe;
pub mod synthetic;
pub mod training;
pub mod transforms;

pub use candle_core::Device;
pub use checkpoint::Checkpoint;
pub use dataset::{ImageRecord, Split, SplitManifest};
pub use disease::{DiseaseLabel, LabelVector, NUM_DISEASES};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, PredictionSet, ThresholdSet};
pub use explain::HeatMap;
pub use losses::{FocalParams, LossKind};
pub use models::{BackboneKind, BackboneSpec, Classifier};
pub use recipe::ModelRecipe;
pub use training::TrainState;
pub use transforms::{ImageTensor, TransformSpec};

/// Version string written into reproducibility stamps and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
