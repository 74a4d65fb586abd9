//! Recipe-driven training with per-epoch validation, best-by-AUC model
//! selection, early stopping and exact resume.
//!
//! A run lives in `runs/<recipe name>/<timestamp>/` and holds
//! `config.toml`, `best.ckpt`, `last.ckpt` and `history.csv`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{ImageRecord, Split, SplitManifest};
use crate::disease::NUM_DISEASES;
use crate::error::{Error, Result};
use crate::evaluation::{self, PredictionSet, Provenance, ThresholdSet};
use crate::models::{build_classifier, BuildOptions, Classifier};
use crate::optim::{Optimizer, Scheduler};
use crate::recipe::{ModelRecipe, ThresholdPolicy};
use crate::transforms::{
    build_eval_transform, build_train_transform, load_image, sample_seed, EvalTransform, GrayImage, ImageTensor,
    TrainTransform,
};

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Where training images come from.
pub trait ImageSource: Sync {
    fn load(&self, image_id: &str) -> Result<GrayImage>;
}

/// Images on disk under a root directory, found by file name at any depth
/// (the public archive nests them as `images_XXX/images/<id>`).
#[derive(Debug, Clone)]
pub struct DirectorySource {
    paths: HashMap<String, PathBuf>,
}

impl DirectorySource {
    pub fn new(root: &Path) -> Result<Self> {
        let mut paths = HashMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let entry = entry.map_err(|e| Error::io(&dir, e))?;
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    paths.entry(name.to_string()).or_insert(path);
                }
            }
        }
        Ok(Self { paths })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

impl ImageSource for DirectorySource {
    fn load(&self, image_id: &str) -> Result<GrayImage> {
        let path = self
            .paths
            .get(image_id)
            .ok_or_else(|| Error::invalid(format!("image {image_id} not found under the data directory")))?;
        load_image(path)
    }
}

/// Decoded images held in memory; mostly for tests and small experiments.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub images: HashMap<String, GrayImage>,
}

impl ImageSource for MemorySource {
    fn load(&self, image_id: &str) -> Result<GrayImage> {
        self.images
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("image {image_id} not in memory source")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `None` only when no disease has both classes in the validation split.
    pub val_macro_auc: Option<f64>,
    pub val_macro_f1: f64,
    pub lr: f64,
}

pub trait MetricsSink {
    fn record(&mut self, rec: &EpochRecord) -> Result<()>;
}

/// Prints one line per epoch.
#[derive(Debug, Default)]
pub struct ConsoleSink;

impl MetricsSink for ConsoleSink {
    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        println!(
            "epoch {:>3}  train_loss {:.5}  val_loss {:.5}  val_auc {}  val_f1 {:.4}  lr {:.2e}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_macro_auc.map_or("n/a".into(), |a| format!("{a:.4}")),
            r.val_macro_f1,
            r.lr
        );
        Ok(())
    }
}

/// Keeps records in memory.
#[derive(Debug, Default)]
pub struct MemorySink(pub Vec<EpochRecord>);

impl MetricsSink for MemorySink {
    fn record(&mut self, rec: &EpochRecord) -> Result<()> {
        self.0.push(rec.clone());
        Ok(())
    }
}

/// Appends to a CSV file, writing the header when the file is new.
#[derive(Debug)]
pub struct CsvSink {
    path: PathBuf,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_macro_auc,val_macro_f1,lr";

impl CsvSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }
}

impl MetricsSink for CsvSink {
    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        let fresh = !self.path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut line = String::new();
        if fresh {
            line.push_str(HISTORY_HEADER);
            line.push('\n');
        }
        line.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_macro_auc.map_or(String::new(), |a| a.to_string()),
            r.val_macro_f1,
            r.lr
        ));
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_macro_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub history: Vec<EpochRecord>,
    pub lr: f64,
    pub optimizer_steps: u64,
    pub scheduler: Scheduler,
    pub epochs_without_improvement: usize,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn initial(recipe: &ModelRecipe) -> Self {
        let lr = recipe.optimizer.lr();
        Self {
            epoch: 0,
            best_val_macro_auc: None,
            best_epoch: None,
            best_checkpoint: None,
            history: Vec::new(),
            lr,
            optimizer_steps: 0,
            scheduler: Scheduler::new(recipe.scheduler, lr),
            epochs_without_improvement: 0,
            stopped_early: false,
        }
    }

    pub fn finished(&self, recipe: &ModelRecipe) -> bool {
        self.stopped_early || self.epoch >= recipe.max_epochs
    }
}

/// Images and labels for the train and validation splits.
pub struct TrainData<'a> {
    pub train: Vec<&'a ImageRecord>,
    pub val: Vec<&'a ImageRecord>,
    pub source: &'a dyn ImageSource,
}

impl<'a> TrainData<'a> {
    pub fn from_manifest(records: &'a [ImageRecord], manifest: &SplitManifest, source: &'a dyn ImageSource) -> Self {
        Self {
            train: manifest.select(records, Split::Train),
            val: manifest.select(records, Split::Val),
            source,
        }
    }

    /// Fails when a patient has images in both splits.
    pub fn check_leakage(&self) -> Result<()> {
        let train: HashSet<&str> = self.train.iter().map(|r| r.patient_id.as_str()).collect();
        let mut shared: Vec<&str> = self
            .val
            .iter()
            .map(|r| r.patient_id.as_str())
            .filter(|p| train.contains(p))
            .collect();
        shared.sort_unstable();
        shared.dedup();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::Leakage(format!(
                "{} patient(s) appear in both train and val, e.g. {}",
                shared.len(),
                shared[0]
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Parent of `<recipe name>/<timestamp>` run directories.
    pub run_root: PathBuf,
    /// Use this directory instead of a fresh timestamped one.
    pub run_dir: Option<PathBuf>,
    pub weights_dir: Option<PathBuf>,
    pub device: Device,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            run_root: PathBuf::from("runs"),
            run_dir: None,
            weights_dir: None,
            device: Device::Cpu,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// `None` for runs that performed no epochs.
    pub run_dir: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Model, optimizer and schedule for one run.
pub struct Trainer {
    recipe: ModelRecipe,
    model: Classifier,
    optimizer: Optimizer,
    state: TrainState,
    train_tf: TrainTransform,
    eval_tf: EvalTransform,
}

impl Trainer {
    pub fn new(recipe: &ModelRecipe, weights_dir: Option<PathBuf>, device: &Device) -> Result<Self> {
        recipe.validate()?;
        let opts = BuildOptions {
            init_seed: recipe.seed,
            weights_dir,
            device: device.clone(),
        };
        let model = build_classifier(recipe.backbone, &opts)?;
        let optimizer = Optimizer::new(recipe.optimizer, model.trainable_vars())?;
        Ok(Self {
            recipe: recipe.clone(),
            model,
            optimizer,
            state: TrainState::initial(recipe),
            train_tf: build_train_transform(&recipe.transform, recipe.seed)?,
            eval_tf: build_eval_transform(&recipe.transform)?,
        })
    }

    /// Restores model, optimizer and run state. `recipe` may differ from the
    /// stored one only in `max_epochs`.
    pub fn from_checkpoint(ckpt: &Checkpoint, recipe: &ModelRecipe, device: &Device) -> Result<Self> {
        ckpt.verify(recipe)?;
        let model = ckpt.build_model(device)?;
        let mut optimizer = Optimizer::new(recipe.optimizer, model.trainable_vars())?;
        optimizer.load_state(ckpt.state.optimizer_steps, ckpt.state.lr, &ckpt.optimizer)?;
        Ok(Self {
            recipe: recipe.clone(),
            model,
            optimizer,
            state: ckpt.state.clone(),
            train_tf: build_train_transform(&recipe.transform, recipe.seed)?,
            eval_tf: build_eval_transform(&recipe.transform)?,
        })
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn recipe(&self) -> &ModelRecipe {
        &self.recipe
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.recipe,
            self.state.clone(),
            self.model.named_tensors(),
            self.optimizer.state_tensors(),
        )
    }

    /// One optimizer step on a prepared batch; returns the batch loss.
    pub fn train_step(&mut self, images: &Tensor, targets: &Tensor) -> Result<f64> {
        let logits = self.model.forward_t(images, true)?;
        let loss = self.recipe.loss.tensor_loss(&logits, targets)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = loss.backward()?;
        self.optimizer.step(&grads)?;
        self.state.optimizer_steps = self.optimizer.steps();
        Ok(value)
    }

    fn load_train_batch(&self, batch: &[(usize, &ImageRecord)], source: &dyn ImageSource) -> Result<(Tensor, Tensor)> {
        let epoch = self.state.epoch as u64;
        let images = batch
            .par_iter()
            .map(|(idx, rec)| {
                let img = source.load(&rec.image_id)?;
                let seed = sample_seed(self.recipe.seed, &[epoch, *idx as u64]);
                self.train_tf.apply_seeded(&img, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = label_tensor(batch.iter().map(|(_, r)| *r), self.model.device())?;
        Ok((ImageTensor::stack(&images, self.model.device())?, targets))
    }

    fn run_epoch(&mut self, data: &TrainData, run_dir: &Path) -> Result<f64> {
        let epoch = self.state.epoch as u64;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(
            self.recipe.seed,
            &[SHUFFLE_STREAM, epoch],
        )));
        let (mut total, mut count) = (0.0, 0usize);
        for (step, chunk) in order.chunks(self.recipe.batch_size).enumerate() {
            let batch: Vec<(usize, &ImageRecord)> = chunk.iter().map(|&i| (i, data.train[i])).collect();
            let (images, targets) = self.load_train_batch(&batch, data.source)?;
            let loss = self.train_step(&images, &targets)?;
            if !loss.is_finite() {
                let snapshot = self.write_nan_snapshot(run_dir, step, &batch, loss)?;
                return Err(Error::NonFiniteLoss {
                    epoch: self.state.epoch + 1,
                    step,
                    snapshot,
                });
            }
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        Ok(total / count as f64)
    }

    fn write_nan_snapshot(
        &self,
        run_dir: &Path,
        step: usize,
        batch: &[(usize, &ImageRecord)],
        loss: f64,
    ) -> Result<PathBuf> {
        let path = run_dir.join(format!("nan_epoch{}_step{step}.json", self.state.epoch + 1));
        let doc = serde_json::json!({
            "epoch": self.state.epoch + 1,
            "step": step,
            "loss": loss.to_string(),
            "lr": self.optimizer.lr(),
            "optimizer_steps": self.optimizer.steps(),
            "image_ids": batch.iter().map(|(_, r)| r.image_id.as_str()).collect::<Vec<_>>(),
        });
        fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))?;
        self.checkpoint().save(&run_dir.join("nan.ckpt"))?;
        Ok(path)
    }

    /// Loss, macro-AUC and macro-F1 on a labelled set, under the recipe's
    /// loss and threshold policy (per-class thresholds are tuned on the set itself).
    pub fn validate(&self, records: &[&ImageRecord], source: &dyn ImageSource) -> Result<(f64, Option<f64>, f64)> {
        let (preds, loss) = predict_with_loss(
            &self.model,
            records,
            source,
            &self.eval_tf,
            self.recipe.batch_size,
            Some(&self.recipe),
        )?;
        let thresholds = match self.recipe.thresholds {
            ThresholdPolicy::Global { threshold } => ThresholdSet::global(threshold)?,
            ThresholdPolicy::PerClass => {
                evaluation::tune_thresholds(&preds, &evaluation::default_grid(), Provenance::Validation)?
            }
        };
        let report = evaluation::evaluate(&preds, &thresholds, self.recipe.loss, &self.recipe.name, Split::Val)?;
        Ok((loss.unwrap_or(report.loss), report.macro_auc, report.macro_f1))
    }

    /// Runs epochs until `max_epochs` or early stopping, checkpointing into `run_dir`.
    pub fn fit(&mut self, data: &TrainData, sink: &mut dyn MetricsSink, run_dir: &Path) -> Result<()> {
        let history = CsvSink::new(run_dir.join("history.csv"));
        let mut history = history;
        while !self.state.finished(&self.recipe) {
            self.optimizer.set_lr(self.state.lr);
            let train_loss = self.run_epoch(data, run_dir)?;
            let (val_loss, val_auc, val_f1) = self.validate(&data.val, data.source)?;
            let rec = EpochRecord {
                epoch: self.state.epoch + 1,
                train_loss,
                val_loss,
                val_macro_auc: val_auc,
                val_macro_f1: val_f1,
                lr: self.state.lr,
            };
            self.state.epoch += 1;
            self.state.history.push(rec.clone());
            self.state.lr = self.state.scheduler.step(val_auc.unwrap_or(f64::NAN), self.state.lr);

            let improved = match (val_auc, self.state.best_val_macro_auc) {
                (Some(a), Some(b)) => a > b,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                self.state.best_val_macro_auc = val_auc;
                self.state.best_epoch = Some(self.state.epoch);
                self.state.best_checkpoint = Some(run_dir.join("best.ckpt"));
                self.state.epochs_without_improvement = 0;
            } else {
                self.state.epochs_without_improvement += 1;
                if self.state.epochs_without_improvement >= self.recipe.early_stop_patience {
                    self.state.stopped_early = true;
                }
            }
            let ckpt = self.checkpoint();
            if improved {
                ckpt.save(&run_dir.join("best.ckpt"))?;
            }
            ckpt.save(&run_dir.join("last.ckpt"))?;
            history.record(&rec)?;
            sink.record(&rec)?;
        }
        Ok(())
    }
}

fn label_tensor<'a>(records: impl Iterator<Item = &'a ImageRecord>, device: &Device) -> Result<Tensor> {
    let flat: Vec<f32> = records.flat_map(|r| r.labels.to_f32()).collect();
    let n = flat.len() / NUM_DISEASES;
    Ok(Tensor::from_vec(flat, (n, NUM_DISEASES), device)?)
}

/// Inference over labelled records; the mean loss is included when a recipe is given.
fn predict_with_loss(
    model: &Classifier,
    records: &[&ImageRecord],
    source: &dyn ImageSource,
    tf: &EvalTransform,
    batch_size: usize,
    recipe: Option<&ModelRecipe>,
) -> Result<(PredictionSet, Option<f64>)> {
    if records.is_empty() {
        return Err(Error::invalid("no images to predict"));
    }
    let mut scores = Vec::with_capacity(records.len());
    let mut loss_sum = 0.0;
    for chunk in records.chunks(batch_size.max(1)) {
        let images = chunk
            .par_iter()
            .map(|r| tf.apply(&source.load(&r.image_id)?))
            .collect::<Result<Vec<_>>>()?;
        let batch = ImageTensor::stack(&images, model.device())?;
        let logits = model.logits(&batch)?.detach();
        if let Some(recipe) = recipe {
            let targets = label_tensor(chunk.iter().copied(), model.device())?;
            let l = recipe.loss.tensor_loss(&logits, &targets)?;
            loss_sum += l.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        }
        let probs: Vec<Vec<f32>> = candle_nn::ops::sigmoid(&logits)?.to_vec2()?;
        for row in probs {
            let mut out = [0.0f64; NUM_DISEASES];
            for (o, p) in out.iter_mut().zip(row) {
                *o = p as f64;
            }
            scores.push(out);
        }
    }
    let preds = PredictionSet::new(
        records.iter().map(|r| r.image_id.clone()).collect(),
        scores,
        records.iter().map(|r| r.labels).collect(),
    )?;
    Ok((preds, recipe.map(|_| loss_sum / records.len() as f64)))
}

/// Sigmoid scores for every record, with deterministic preprocessing.
pub fn predict_records(
    model: &Classifier,
    records: &[&ImageRecord],
    source: &dyn ImageSource,
    tf: &EvalTransform,
    batch_size: usize,
) -> Result<PredictionSet> {
    Ok(predict_with_loss(model, records, source, tf, batch_size, None)?.0)
}

fn new_run_dir(recipe: &ModelRecipe, opts: &TrainOptions) -> Result<PathBuf> {
    let dir = match &opts.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
            opts.run_root.join(&recipe.name).join(stamp)
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn check_data(data: &TrainData) -> Result<()> {
    data.check_leakage()?;
    if data.train.is_empty() {
        return Err(Error::invalid("the train split is empty"));
    }
    if data.val.is_empty() {
        return Err(Error::invalid("the val split is empty"));
    }
    Ok(())
}

/// Trains `recipe` from scratch. A zero-epoch recipe returns the initial
/// state without building a model or writing anything.
pub fn train(
    recipe: &ModelRecipe,
    data: &TrainData,
    sink: &mut dyn MetricsSink,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    recipe.validate()?;
    check_data(data)?;
    if recipe.max_epochs == 0 {
        return Ok(TrainOutcome {
            state: TrainState::initial(recipe),
            run_dir: None,
            last_checkpoint: None,
        });
    }
    let mut trainer = Trainer::new(recipe, opts.weights_dir.clone(), &opts.device)?;
    let run_dir = new_run_dir(recipe, opts)?;
    recipe.save(&run_dir.join("config.toml"))?;
    trainer.fit(data, sink, &run_dir)?;
    Ok(TrainOutcome {
        state: trainer.state.clone(),
        last_checkpoint: Some(run_dir.join("last.ckpt")),
        run_dir: Some(run_dir),
    })
}

/// Continues the run saved in `checkpoint`, in the checkpoint's directory.
/// `recipe` defaults to the stored one; when given, it must match it in
/// everything but `max_epochs`.
pub fn resume(
    checkpoint: &Path,
    recipe: Option<&ModelRecipe>,
    data: &TrainData,
    sink: &mut dyn MetricsSink,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(checkpoint, &opts.device)?;
    let recipe = recipe.cloned().unwrap_or_else(|| ckpt.recipe.clone());
    ckpt.verify(&recipe)?;
    let run_dir = checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    if ckpt.state.finished(&recipe) {
        return Ok(TrainOutcome {
            state: ckpt.state,
            run_dir: Some(run_dir),
            last_checkpoint: Some(checkpoint.to_path_buf()),
        });
    }
    check_data(data)?;
    let mut trainer = Trainer::from_checkpoint(&ckpt, &recipe, &opts.device)?;
    trainer.fit(data, sink, &run_dir)?;
    Ok(TrainOutcome {
        state: trainer.state.clone(),
        last_checkpoint: Some(run_dir.join("last.ckpt")),
        run_dir: Some(run_dir),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disease::LabelVector;

    fn rec(id: &str, patient: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            patient_id: patient.into(),
            labels: LabelVector::NONE,
            age: None,
            gender: None,
        }
    }

    #[test]
    fn leakage_is_fatal() {
        let a = rec("a.png", "p1");
        let b = rec("b.png", "p1");
        let src = MemorySource::default();
        let data = TrainData {
            train: vec![&a],
            val: vec![&b],
            source: &src,
        };
        let err = train(
            &ModelRecipe::dacnet(),
            &data,
            &mut MemorySink::default(),
            &TrainOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Leakage(_)));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let a = rec("a.png", "p1");
        let b = rec("b.png", "p2");
        let src = MemorySource::default();
        let data = TrainData {
            train: vec![&a],
            val: vec![&b],
            source: &src,
        };
        let mut recipe = ModelRecipe::dacnet();
        recipe.max_epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            run_root: dir.path().to_path_buf(),
            ..Default::default()
        };
        let out = train(&recipe, &data, &mut MemorySink::default(), &opts).unwrap();
        assert_eq!(out.state, TrainState::initial(&recipe));
        assert!(out.last_checkpoint.is_none());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn empty_train_split_rejected() {
        let b = rec("b.png", "p2");
        let src = MemorySource::default();
        let data = TrainData {
            train: vec![],
            val: vec![&b],
            source: &src,
        };
        assert!(train(
            &ModelRecipe::dacnet(),
            &data,
            &mut MemorySink::default(),
            &TrainOptions::default()
        )
        .is_err());
    }

    #[test]
    fn csv_sink_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let mut sink = CsvSink::new(&path);
        let r = EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.4,
            val_macro_auc: Some(0.6),
            val_macro_f1: 0.2,
            lr: 1e-3,
        };
        sink.record(&r).unwrap();
        sink.record(&EpochRecord { epoch: 2, ..r }).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap(), HISTORY_HEADER);
    }
}
