mod common;

use std::fs;

use common::{memory_dataset, tiny_recipe};
use dacnet_core::optim::OptimizerSpec;
use dacnet_core::training::{self, MemorySink, TrainData, TrainOptions, HISTORY_HEADER};
use dacnet_core::{Checkpoint, Device, Error};

fn opts(dir: &std::path::Path) -> TrainOptions {
    TrainOptions {
        run_dir: Some(dir.to_path_buf()),
        ..TrainOptions::default()
    }
}

#[test]
fn run_directory_layout_and_history() {
    let (records, manifest, source) = memory_dataset(30, 1);
    let data = TrainData::from_manifest(&records, &manifest, &source);
    let root = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        run_root: root.path().to_path_buf(),
        ..TrainOptions::default()
    };
    let mut sink = MemorySink::default();
    let out = training::train(&tiny_recipe(2), &data, &mut sink, &options).unwrap();
    let run_dir = out.run_dir.unwrap();
    assert_eq!(run_dir.parent().unwrap(), root.path().join("tiny_smoke"));
    for f in ["config.toml", "best.ckpt", "last.ckpt", "history.csv"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    assert_eq!(sink.0.len(), 2);
    assert_eq!(out.state.history, sink.0);
    let csv = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], HISTORY_HEADER);
    assert_eq!(lines.len(), 3);
    for (i, rec) in sink.0.iter().enumerate() {
        assert_eq!(rec.epoch, i + 1);
        assert!(rec.train_loss.is_finite() && rec.val_loss.is_finite());
        assert!(rec.val_macro_auc.is_some());
        assert!((0.0..=1.0).contains(&rec.val_macro_f1));
    }
    let saved = dacnet_core::ModelRecipe::load(&run_dir.join("config.toml")).unwrap();
    assert_eq!(saved, tiny_recipe(2));
}

#[test]
fn best_checkpoint_maximizes_validation_auc() {
    let (records, manifest, source) = memory_dataset(30, 2);
    let data = TrainData::from_manifest(&records, &manifest, &source);
    let dir = tempfile::tempdir().unwrap();
    let out = training::train(&tiny_recipe(4), &data, &mut MemorySink::default(), &opts(dir.path())).unwrap();
    let s = &out.state;
    let aucs: Vec<f64> = s.history.iter().map(|r| r.val_macro_auc.unwrap()).collect();
    let best = aucs.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(s.best_val_macro_auc, Some(best));
    // first epoch reaching the maximum wins
    let first = aucs.iter().position(|a| *a == best).unwrap() + 1;
    assert_eq!(s.best_epoch, Some(first));
    let ckpt = Checkpoint::load(&dir.path().join("best.ckpt"), &Device::Cpu).unwrap();
    assert_eq!(ckpt.state.epoch, first);
    assert_eq!(ckpt.state.best_val_macro_auc, Some(best));
    // running best never decreases
    let mut running = f64::MIN;
    for a in &aucs {
        let next = running.max(*a);
        assert!(next >= running);
        running = next;
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (records, manifest, source) = memory_dataset(30, 3);
    let data = TrainData::from_manifest(&records, &manifest, &source);

    let full_dir = tempfile::tempdir().unwrap();
    let full = training::train(
        &tiny_recipe(3),
        &data,
        &mut MemorySink::default(),
        &opts(full_dir.path()),
    )
    .unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let part = training::train(
        &tiny_recipe(2),
        &data,
        &mut MemorySink::default(),
        &opts(part_dir.path()),
    )
    .unwrap();
    assert_eq!(part.state.history[..], full.state.history[..2]);

    let resumed = training::resume(
        &part_dir.path().join("last.ckpt"),
        Some(&tiny_recipe(3)),
        &data,
        &mut MemorySink::default(),
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(resumed.run_dir.as_deref(), Some(part_dir.path()));
    let (a, b) = (&full.state.history[2], &resumed.state.history[2]);
    assert_eq!(b.epoch, 3);
    assert!(
        (a.val_loss - b.val_loss).abs() < 1e-6,
        "{} vs {}",
        a.val_loss,
        b.val_loss
    );
    assert!((a.train_loss - b.train_loss).abs() < 1e-6);
    assert_eq!(a.val_macro_auc.is_some(), b.val_macro_auc.is_some());
    assert_eq!(full.state.optimizer_steps, resumed.state.optimizer_steps);
}

#[test]
fn resume_rejects_altered_disease_ordering() {
    let (records, manifest, source) = memory_dataset(20, 4);
    let data = TrainData::from_manifest(&records, &manifest, &source);
    let dir = tempfile::tempdir().unwrap();
    training::train(&tiny_recipe(1), &data, &mut MemorySink::default(), &opts(dir.path())).unwrap();
    let path = dir.path().join("last.ckpt");
    let mut ckpt = Checkpoint::load(&path, &Device::Cpu).unwrap();
    ckpt.diseases.swap(0, 1);
    ckpt.save(&path).unwrap();
    let err = training::resume(
        &path,
        Some(&tiny_recipe(2)),
        &data,
        &mut MemorySink::default(),
        &TrainOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch { .. }), "{err}");
}

#[test]
fn resume_rejects_a_different_recipe() {
    let (records, manifest, source) = memory_dataset(20, 5);
    let data = TrainData::from_manifest(&records, &manifest, &source);
    let dir = tempfile::tempdir().unwrap();
    training::train(&tiny_recipe(1), &data, &mut MemorySink::default(), &opts(dir.path())).unwrap();
    let mut other = tiny_recipe(2);
    other.seed += 1;
    let err = training::resume(
        &dir.path().join("last.ckpt"),
        Some(&other),
        &data,
        &mut MemorySink::default(),
        &TrainOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch { .. }));
}

#[test]
fn resume_of_finished_run_is_a_no_op() {
    let (records, manifest, source) = memory_dataset(20, 6);
    let data = TrainData::from_manifest(&records, &manifest, &source);
    let dir = tempfile::tempdir().unwrap();
    training::train(&tiny_recipe(1), &data, &mut MemorySink::default(), &opts(dir.path())).unwrap();
    let path = dir.path().join("last.ckpt");
    let before = fs::read(&path).unwrap();
    let mut sink = MemorySink::default();
    let out = training::resume(&path, None, &data, &mut sink, &TrainOptions::default()).unwrap();
    assert_eq!(out.state.epoch, 1);
    assert!(sink.0.is_empty());
    assert_eq!(before, fs::read(&path).unwrap());
}

#[test]
fn stalled_validation_stops_early() {
    let (records, manifest, source) = memory_dataset(20, 7);
    let data = TrainData::from_manifest(&records, &manifest, &source);
    let dir = tempfile::tempdir().unwrap();
    let mut recipe = tiny_recipe(10);
    // updates this small leave f32 weights unchanged, so validation AUC cannot improve
    recipe.optimizer = OptimizerSpec::Adam { lr: 1e-30 };
    recipe.early_stop_patience = 2;
    let out = training::train(&recipe, &data, &mut MemorySink::default(), &opts(dir.path())).unwrap();
    assert!(out.state.stopped_early);
    assert_eq!(out.state.epoch, 3);
    assert_eq!(out.state.best_epoch, Some(1));
}

#[test]
fn nan_loss_aborts_with_snapshot() {
    let (records, manifest, source) = memory_dataset(20, 8);
    let data = TrainData::from_manifest(&records, &manifest, &source);
    // the first update blows the weights up; activations overflow on the next step
    let mut recipe = tiny_recipe(1);
    recipe.optimizer = OptimizerSpec::Adam { lr: 1e30 };
    let dir = tempfile::tempdir().unwrap();
    let err = training::train(&recipe, &data, &mut MemorySink::default(), &opts(dir.path())).unwrap_err();
    let Error::NonFiniteLoss { snapshot, epoch, .. } = err else {
        panic!("expected a non-finite loss error, got {err}");
    };
    assert_eq!(epoch, 1);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&snapshot).unwrap()).unwrap();
    assert!(!doc["image_ids"].as_array().unwrap().is_empty());
    assert!(dir.path().join("nan.ckpt").is_file());
    assert!(!dir.path().join("last.ckpt").exists());
}

#[test]
fn same_seed_same_history() {
    let (records, manifest, source) = memory_dataset(20, 9);
    let data = TrainData::from_manifest(&records, &manifest, &source);
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = training::train(&tiny_recipe(2), &data, &mut MemorySink::default(), &opts(a_dir.path())).unwrap();
    let b = training::train(&tiny_recipe(2), &data, &mut MemorySink::default(), &opts(b_dir.path())).unwrap();
    assert_eq!(a.state.history, b.state.history);
    assert_eq!(
        fs::read(a_dir.path().join("last.ckpt")).unwrap().len(),
        fs::read(b_dir.path().join("last.ckpt")).unwrap().len()
    );
}
