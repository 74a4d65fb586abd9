use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dacnet_core::dataset::{
    label_combination_stats, make_patient_split, parse_catalog, patients_per_split, read_manifest, write_manifest,
    Catalog, SplitRatios, METADATA_FILE,
};
use dacnet_core::evaluation::{self, render_comparison, Baseline, Provenance};
use dacnet_core::explain::{encode_png, grad_cam, overlay};
use dacnet_core::synthetic::{synthetic_catalog, write_dataset, TileImages};
use dacnet_core::training::{self, predict_records, ConsoleSink, DirectorySource, TrainData, TrainOptions};
use dacnet_core::transforms::{build_eval_transform, load_image};
use dacnet_core::{
    Checkpoint, Device, DiseaseLabel, EvalReport, ImageTensor, ModelRecipe, PredictionSet, Split, SplitManifest,
    ThresholdSet,
};

use crate::stamp::{hash_parts, Stamp};
use crate::{Command, DataArgs};

const MANIFEST_FILE: &str = "splits.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareSplits {
            metadata,
            out,
            seed,
            ratios,
        } => prepare_splits(&metadata, out, seed, ratios),
        Command::Train {
            recipe,
            data,
            seed,
            max_epochs,
            run_root,
            weights_dir,
            resume,
        } => train(
            recipe.as_deref(),
            &data,
            seed,
            max_epochs,
            run_root,
            weights_dir,
            resume,
        ),
        Command::TuneThresholds {
            checkpoint,
            data,
            split,
            out,
            batch_size,
        } => tune_thresholds(&checkpoint, &data, split, &out, batch_size),
        Command::Evaluate {
            checkpoint,
            data,
            split,
            thresholds,
            out,
            predictions,
            batch_size,
        } => evaluate(&checkpoint, &data, split, &thresholds, out, predictions, batch_size),
        Command::Explain {
            checkpoint,
            image,
            disease,
            out,
        } => explain(&checkpoint, &image, &disease, &out),
        Command::Serve {
            checkpoint,
            thresholds,
            port,
            host,
        } => serve(checkpoint, thresholds, &host, port),
        Command::Stats { metadata, top } => stats(&metadata, top),
        Command::Compare {
            reports,
            baseline,
            format,
            out,
        } => compare(&reports, baseline, format, out),
        Command::Synth {
            out,
            patients,
            max_images,
            seed,
        } => synth(&out, patients, max_images, seed),
    }
}

fn load_catalog(path: &Path) -> Result<Catalog> {
    let catalog = parse_catalog(path).with_context(|| format!("reading metadata {}", path.display()))?;
    let w = &catalog.warnings;
    if w.bad_age + w.bad_gender > 0 {
        log::warn!(
            "{}: {} unparseable ages and {} unparseable genders left empty",
            path.display(),
            w.bad_age,
            w.bad_gender
        );
    }
    Ok(catalog)
}

fn prepare_splits(metadata: &Path, out: Option<PathBuf>, seed: u64, ratios: SplitRatios) -> Result<()> {
    let catalog = load_catalog(metadata)?;
    let manifest = make_patient_split(&catalog.records, ratios, seed)?;
    let out = out.unwrap_or_else(|| metadata.with_file_name(MANIFEST_FILE));
    write_manifest(&manifest, &out)?;
    let patients = patients_per_split(&catalog.records, &manifest);
    for (split, n_patients) in Split::ALL.iter().zip(patients) {
        println!(
            "{split:<5} {:>7} images {:>6} patients",
            manifest.select(&catalog.records, *split).len(),
            n_patients
        );
    }
    println!("manifest written to {}", out.display());
    let metadata_bytes = fs::read(metadata).with_context(|| format!("reading {}", metadata.display()))?;
    let hash = hash_parts([
        metadata_bytes.as_slice(),
        ratios.to_string().as_bytes(),
        seed.to_string().as_bytes(),
    ]);
    Stamp::new("prepare-splits", Some(seed), hash)
        .artifact(&out)
        .write_beside(&out)?;
    Ok(())
}

fn load_recipe(arg: &str) -> Result<ModelRecipe> {
    if let Some(r) = ModelRecipe::preset(arg) {
        return Ok(r);
    }
    let path = Path::new(arg);
    if !path.exists() {
        bail!(
            "{arg:?} is neither a preset ({}, tiny_smoke) nor an existing recipe file",
            dacnet_core::recipe::PRESET_NAMES.join(", ")
        );
    }
    Ok(ModelRecipe::load(path)?)
}

/// Catalog, manifest and image directory named by `DataArgs`.
struct DataContext {
    catalog: Catalog,
    manifest: SplitManifest,
    source: DirectorySource,
}

impl DataContext {
    fn load(args: &DataArgs) -> Result<Self> {
        let metadata = args
            .metadata
            .clone()
            .unwrap_or_else(|| args.data_dir.join(METADATA_FILE));
        let manifest_path = args
            .manifest
            .clone()
            .unwrap_or_else(|| args.data_dir.join(MANIFEST_FILE));
        let catalog = load_catalog(&metadata)?;
        let manifest = read_manifest(&manifest_path).with_context(|| {
            format!(
                "reading manifest {} (run prepare-splits first)",
                manifest_path.display()
            )
        })?;
        manifest.check_patient_disjoint(&catalog.records)?;
        let source = DirectorySource::new(&args.data_dir)?;
        Ok(Self {
            catalog,
            manifest,
            source,
        })
    }

    fn split(&self, split: Split) -> Result<Vec<&dacnet_core::ImageRecord>> {
        let records = self.manifest.select(&self.catalog.records, split);
        if records.is_empty() {
            bail!("the {split} split is empty");
        }
        Ok(records)
    }
}

fn train(
    recipe_arg: Option<&str>,
    data: &DataArgs,
    seed: Option<u64>,
    max_epochs: Option<usize>,
    run_root: PathBuf,
    weights_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut recipe = match (recipe_arg, &resume) {
        (Some(r), _) => load_recipe(r)?,
        (None, Some(ckpt)) => Checkpoint::load(ckpt, &Device::Cpu)?.recipe,
        (None, None) => bail!("--recipe is required unless --resume is given"),
    };
    if let Some(s) = seed {
        recipe.seed = s;
    }
    if let Some(e) = max_epochs {
        recipe.max_epochs = e;
    }
    let ctx = DataContext::load(data)?;
    let train_data = TrainData::from_manifest(&ctx.catalog.records, &ctx.manifest, &ctx.source);
    println!(
        "recipe {} ({}), {} train / {} val images",
        recipe.name,
        &recipe.fingerprint()[..12],
        train_data.train.len(),
        train_data.val.len()
    );
    let opts = TrainOptions {
        run_root,
        run_dir: None,
        weights_dir,
        device: Device::Cpu,
    };
    let outcome = match &resume {
        Some(ckpt) => training::resume(ckpt, Some(&recipe), &train_data, &mut ConsoleSink, &opts)?,
        None => training::train(&recipe, &train_data, &mut ConsoleSink, &opts)?,
    };
    let Some(run_dir) = outcome.run_dir else {
        println!("max_epochs is 0: nothing to train");
        return Ok(());
    };
    let s = &outcome.state;
    match (s.best_epoch, s.best_val_macro_auc) {
        (Some(e), Some(auc)) => println!("best epoch {e}, val macro-AUC {auc:.4}"),
        _ => println!("no epoch produced a defined validation AUC"),
    }
    if s.stopped_early {
        println!("stopped early after epoch {}", s.epoch);
    }
    println!("run directory {}", run_dir.display());
    let mut stamp = Stamp::new("train", Some(recipe.seed), recipe.fingerprint());
    for f in ["config.toml", "best.ckpt", "last.ckpt", "history.csv"] {
        let p = run_dir.join(f);
        if p.exists() {
            stamp = stamp.artifact(&p);
        }
    }
    stamp.write_beside(&run_dir)?;
    Ok(())
}

fn predict_split(ckpt: &Checkpoint, ctx: &DataContext, split: Split, batch_size: usize) -> Result<PredictionSet> {
    let model = ckpt.build_model(&Device::Cpu)?;
    let tf = build_eval_transform(&ckpt.recipe.transform)?;
    let records = ctx.split(split)?;
    log::info!("scoring {} {split} images", records.len());
    Ok(predict_records(&model, &records, &ctx.source, &tf, batch_size)?)
}

fn tune_thresholds(checkpoint: &Path, data: &DataArgs, split: Split, out: &Path, batch_size: usize) -> Result<()> {
    let provenance = match split {
        Split::Val => Provenance::Validation,
        Split::Test => {
            log::warn!("fitting thresholds on the test split; evaluate will refuse them");
            Provenance::Test
        }
        Split::Train => bail!("thresholds are fitted on val (or, for diagnostics only, test), not train"),
    };
    let ckpt = Checkpoint::load(checkpoint, &Device::Cpu)?;
    let ctx = DataContext::load(data)?;
    let preds = predict_split(&ckpt, &ctx, split, batch_size)?;
    let set = evaluation::tune_thresholds(&preds, &evaluation::default_grid(), provenance)?;
    set.save(out)?;
    for d in DiseaseLabel::ALL {
        let (_, f1) = evaluation::tune_one(&preds.scores_for(d), &preds.targets_for(d), &evaluation::default_grid())?;
        println!("{:<20} {:.2}  (F1 {:.4})", d.name(), set.get(d), f1);
    }
    println!("thresholds written to {}", out.display());
    Stamp::new("tune-thresholds", Some(ckpt.recipe.seed), ckpt.fingerprint.clone())
        .artifact(out)
        .write_beside(out)?;
    Ok(())
}

fn evaluate(
    checkpoint: &Path,
    data: &DataArgs,
    split: Split,
    thresholds: &str,
    out: Option<PathBuf>,
    predictions: Option<PathBuf>,
    batch_size: usize,
) -> Result<()> {
    let thresholds = ThresholdSet::load_or_global(thresholds)?;
    // fail before any inference work
    if thresholds.provenance == Provenance::Test {
        return Err(dacnet_core::Error::Leakage(
            "thresholds were fitted on the test split; refit them on validation predictions".into(),
        )
        .into());
    }
    let ckpt = Checkpoint::load(checkpoint, &Device::Cpu)?;
    let ctx = DataContext::load(data)?;
    let preds = predict_split(&ckpt, &ctx, split, batch_size)?;
    let report = evaluation::evaluate(&preds, &thresholds, ckpt.recipe.loss, &ckpt.recipe.name, split)?;
    print!("{}", report.render_text());
    let out = out.unwrap_or_else(|| checkpoint.with_file_name(format!("eval_{split}.json")));
    report.save_json(&out)?;
    let mut stamp = Stamp::new("evaluate", Some(ckpt.recipe.seed), ckpt.fingerprint.clone()).artifact(&out);
    if let Some(p) = &predictions {
        preds.write_csv(p)?;
        stamp = stamp.artifact(p);
    }
    println!("report written to {}", out.display());
    stamp.write_beside(&out)?;
    Ok(())
}

fn explain(checkpoint: &Path, image: &Path, disease: &str, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint, &Device::Cpu)?;
    let model = ckpt.build_model(&Device::Cpu)?;
    if !model.kind().supports_cam() {
        bail!("Grad-CAM is not available for the {} backbone", model.kind());
    }
    let tf = build_eval_transform(&ckpt.recipe.transform)?;
    let gray = load_image(image)?;
    let tensor = tf.apply(&gray)?;
    let probs = model.predict_probabilities(&ImageTensor::stack(std::slice::from_ref(&tensor), &Device::Cpu)?)?[0];
    let target = if disease == "top1" {
        DiseaseLabel::ALL
            .into_iter()
            .max_by(|a, b| probs[a.index()].total_cmp(&probs[b.index()]))
            .expect("fourteen diseases")
    } else {
        disease.parse()?
    };
    let heat = grad_cam(&model, &tensor, target)?;
    let png = encode_png(&overlay(&heat, &tf.resized_gray(&gray))?)?;
    fs::write(out, png).with_context(|| format!("writing {}", out.display()))?;
    println!("{} p={:.4}", target.name(), probs[target.index()]);
    if let Some((x, y)) = heat.centroid() {
        println!("heat centroid at x={x:.1} y={y:.1}");
    }
    println!("overlay written to {}", out.display());
    let image_bytes = fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    let hash = hash_parts([
        ckpt.fingerprint.as_bytes(),
        image_bytes.as_slice(),
        target.name().as_bytes(),
    ]);
    Stamp::new("explain", Some(ckpt.recipe.seed), hash)
        .artifact(out)
        .write_beside(out)?;
    Ok(())
}

fn serve(checkpoint: PathBuf, thresholds: Option<PathBuf>, host: &str, port: u16) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        if thresholds.is_none() {
            log::warn!("no --thresholds given: every disease is flagged at 0.5");
        }
        let config = dacnet_service::ServiceConfig { checkpoint, thresholds };
        dacnet_service::serve(config, listener).await?;
        Ok(())
    })
}

fn stats(metadata: &Path, top: Option<usize>) -> Result<()> {
    let catalog = load_catalog(metadata)?;
    let stats = label_combination_stats(&catalog.records)?;
    println!("{} images, {} label combinations", stats.total, stats.len());
    print!("{}", stats.render(top));
    Ok(())
}

fn compare(paths: &[PathBuf], baseline: bool, format: Format, out: Option<PathBuf>) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| EvalReport::load_json(p).with_context(|| format!("reading report {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let base = baseline.then(Baseline::chexnet_2017);
    let table = render_comparison(&reports, base.as_ref())?;
    let text = match format {
        Format::Text => table.to_text(),
        Format::Csv => table.to_csv(),
        Format::Json => table.to_json(),
    };
    match &out {
        Some(p) => {
            fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
            let mut parts: Vec<Vec<u8>> = Vec::new();
            for r in paths {
                parts.push(fs::read(r)?);
            }
            Stamp::new("compare", None, hash_parts(parts))
                .artifact(p)
                .write_beside(p)?;
            println!("comparison written to {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn synth(out: &Path, patients: usize, max_images: usize, seed: u64) -> Result<()> {
    if patients == 0 {
        bail!("--patients must be positive");
    }
    let records = synthetic_catalog(patients, max_images, seed);
    write_dataset(out, &records, &TileImages::new(seed), seed)?;
    println!(
        "{} images for {patients} patients written to {}",
        records.len(),
        out.display()
    );
    let hash = hash_parts([patients.to_string(), max_images.to_string(), seed.to_string()]);
    Stamp::new("synth", Some(seed), hash)
        .artifact(&out.join(METADATA_FILE))
        .write_beside(out)?;
    Ok(())
}
