use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dacnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run dacnet")
}

fn ok(args: &[&str]) -> String {
    let out = dacnet(args);
    assert!(
        out.status.success(),
        "dacnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic dataset plus its split manifest.
fn dataset(dir: &Path, patients: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--patients",
        &patients.to_string(),
        "--seed",
        "5",
    ]);
    ok(&["prepare-splits", "--metadata", s(&data.join("Data_Entry_2017.csv"))]);
    data
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "prepare-splits",
        "train",
        "tune-thresholds",
        "evaluate",
        "explain",
        "serve",
        "stats",
        "compare",
        "synth",
    ] {
        let out = ok(&[sub, "--help"]);
        assert!(out.contains("Usage:"), "{sub}: {out}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dacnet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        dacnet(&["stats", "--metadata", "x.csv", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(dacnet(&[]).status.code(), Some(2));
}

#[test]
fn module_errors_exit_1() {
    let out = dacnet(&["stats", "--metadata", "/nonexistent/Data_Entry_2017.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn prepare_splits_is_deterministic_and_stamped() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 60);
    let meta = data.join("Data_Entry_2017.csv");
    let first = fs::read(data.join("splits.tsv")).unwrap();
    let again = dir.path().join("again.tsv");
    ok(&[
        "prepare-splits",
        "--metadata",
        s(&meta),
        "--out",
        s(&again),
        "--seed",
        "17",
    ]);
    assert_eq!(first, fs::read(&again).unwrap());
    let other = dir.path().join("other.tsv");
    ok(&[
        "prepare-splits",
        "--metadata",
        s(&meta),
        "--out",
        s(&other),
        "--seed",
        "18",
    ]);
    assert_ne!(first, fs::read(&other).unwrap());

    let stamp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("again.tsv.stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["seed"], 17);
    assert_eq!(stamp["command"], "prepare-splits");
    assert_eq!(stamp["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(stamp["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn stats_prints_combination_table() {
    let dir = tempfile::tempdir().unwrap();
    let meta = dir.path().join("meta.csv");
    fs::write(
        &meta,
        "Image Index,Finding Labels,Follow-up #,Patient ID,Patient Age,Patient Gender\n\
         a.png,No Finding,0,1,50,M\n\
         b.png,No Finding,0,2,50,F\n\
         c.png,Mass|Edema,0,3,50,F\n",
    )
    .unwrap();
    let out = ok(&["stats", "--metadata", s(&meta)]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "3 images, 2 label combinations");
    let first: Vec<&str> = lines[1].split_whitespace().collect();
    assert_eq!(first, ["No", "Finding", "2", "66.67%"]);
    let top1 = ok(&["stats", "--metadata", s(&meta), "--top", "1"]);
    assert_eq!(top1.lines().count(), 2);
}

#[test]
fn full_pipeline_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 40);
    let runs = dir.path().join("runs");
    let out = ok(&[
        "train",
        "--recipe",
        "tiny_smoke",
        "--data-dir",
        s(&data),
        "--max-epochs",
        "1",
        "--run-root",
        s(&runs),
    ]);
    assert!(out.contains("epoch   1"), "{out}");
    let run_dir = fs::read_dir(runs.join("tiny_smoke"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    for f in ["config.toml", "last.ckpt", "history.csv", "stamp.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let ckpt = run_dir.join("last.ckpt");

    let thresholds = dir.path().join("thresholds.json");
    ok(&[
        "tune-thresholds",
        "--checkpoint",
        s(&ckpt),
        "--data-dir",
        s(&data),
        "--out",
        s(&thresholds),
    ]);
    assert!(dir.path().join("thresholds.json.stamp.json").exists());

    let report = dir.path().join("report.json");
    let preds = dir.path().join("preds.csv");
    let out = ok(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data-dir",
        s(&data),
        "--thresholds",
        s(&thresholds),
        "--out",
        s(&report),
        "--predictions",
        s(&preds),
    ]);
    assert!(out.contains("Macro average"), "{out}");
    assert!(report.exists() && preds.exists());

    // thresholds fitted on test must be refused
    let leaky = dir.path().join("leaky.json");
    ok(&[
        "tune-thresholds",
        "--checkpoint",
        s(&ckpt),
        "--data-dir",
        s(&data),
        "--split",
        "test",
        "--out",
        s(&leaky),
    ]);
    let refused = dacnet(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--data-dir",
        s(&data),
        "--thresholds",
        s(&leaky),
    ]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("leakage"));

    let cam = dir.path().join("cam.png");
    let image = data.join("images").join("00000001_000.png");
    let out = ok(&[
        "explain",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&image),
        "--out",
        s(&cam),
    ]);
    assert!(out.contains("overlay written"), "{out}");
    assert_eq!(&fs::read(&cam).unwrap()[1..4], b"PNG");

    let table = ok(&["compare", "--report", s(&report), "--baseline"]);
    assert!(table.contains("CheXNet"), "{table}");
    assert!(table.contains("Hernia"));

    // a finished run resumes as a no-op
    let before = fs::read(&ckpt).unwrap();
    ok(&["train", "--resume", s(&ckpt), "--data-dir", s(&data)]);
    assert_eq!(before, fs::read(&ckpt).unwrap());
}

#[test]
fn unknown_recipe_is_a_module_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 20);
    let out = dacnet(&["train", "--recipe", "chexnext", "--data-dir", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("neither a preset"));
}
