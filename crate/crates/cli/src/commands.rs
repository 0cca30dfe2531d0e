//! Subcommand implementations. Each returns the final JSON record that
//! `main` prints on stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use disc_core::classifier::{train, MANIFEST_FILE};
use disc_core::datasets::{load_archive, load_image_folder, toy_dataset_cached, LabeledImageSet, Split};
use disc_core::engine::{batch_generate, load_outputs, write_outputs, CFResult};
use disc_core::metrics::{aggregate_report, write_report, CdSettings};
use disc_core::{DiscError, Result, TrainedBundle};
use serde_json::{json, Value};

use crate::config::{DataConfig, DataSource, RunConfig};

/// Print one JSON record on stdout.
pub fn emit(value: &Value) {
    println!("{value}");
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| DiscError::Config(format!("data.{key} is required for folder and archive sources")))
}

fn class_map(d: &DataConfig) -> BTreeMap<String, u32> {
    d.classes.iter().enumerate().map(|(i, c)| (c.clone(), i as u32)).collect()
}

fn load_source(d: &DataConfig, path: &Option<PathBuf>, key: &str, split: Split) -> Result<LabeledImageSet> {
    let path = required(path, key)?;
    let set = match d.source {
        DataSource::Folder => load_image_folder(path, d.image_size, &class_map(d))?,
        DataSource::Archive => load_archive(path, split)?.0,
        DataSource::Toy => unreachable!("toy data is generated"),
    };
    Ok(set.with_split(split))
}

pub fn load_train(d: &DataConfig) -> Result<LabeledImageSet> {
    match d.source {
        DataSource::Toy => toy_dataset_cached(d.n_per_class, d.image_size, d.seed),
        _ => load_source(d, &d.train_path, "train_path", Split::Train),
    }
}

pub fn load_test(d: &DataConfig) -> Result<LabeledImageSet> {
    match d.source {
        DataSource::Toy => Ok(toy_dataset_cached(d.test_n_per_class, d.image_size, d.test_seed)?.with_split(Split::Test)),
        _ => load_source(d, &d.test_path, "test_path", Split::Test),
    }
}

/// Up to `num_queries` images of `query_class`.
pub fn load_queries(d: &DataConfig) -> Result<LabeledImageSet> {
    let pool = match d.source {
        DataSource::Toy => toy_dataset_cached(d.num_queries, d.image_size, d.query_seed)?.with_split(Split::Test),
        _ => load_source(d, &d.query_path, "query_path", Split::Test)?,
    };
    let of_class = pool.of_class(d.query_class)?;
    of_class.first(d.num_queries.min(of_class.len()))
}

pub fn load_bundle(dir: &Path) -> Result<TrainedBundle> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(DiscError::MissingArtifact(format!("no trained bundle at {}", dir.display())));
    }
    TrainedBundle::load(dir)
}

pub fn train_classifier(cfg: &RunConfig) -> Result<Value> {
    let data = load_train(&cfg.data)?;
    log::info!("training {:?} classifier on {} images", cfg.classifier.mode, data.len());
    let bundle = train(&data, &cfg.classifier)?;
    let dir = cfg.output.bundle_dir();
    bundle.save(&dir)?;
    cfg.write_resolved(&cfg.output.dir)?;
    let m = &bundle.manifest;
    Ok(json!({
        "event": "trained",
        "mode": m.mode,
        "val_accuracy": m.val_accuracy,
        "duq_val_accuracy": m.duq_val_accuracy,
        "epochs": m.epochs_run,
        "steps": m.steps_run,
        "train_loss_stats": m.train_loss_stats,
        "bundle": dir,
    }))
}

fn run_generation(cfg: &RunConfig, bundle: &TrainedBundle, workers: usize) -> Result<(Vec<CFResult>, String)> {
    let settings = cfg.settings();
    settings.objective.validate(bundle)?;
    let queries = load_queries(&cfg.data)?;
    log::info!("generating {} counterfactuals with {workers} worker(s)", queries.len());
    let progress = |i: usize, r: &CFResult| {
        log::info!("query {i}: success={} p={:.3} stages={}", r.success, r.final_prob, r.stages_run);
        emit(&json!({
            "event": "query",
            "idx": i,
            "success": r.success,
            "final_prob": r.final_prob,
            "stages_run": r.stages_run,
            "diverged": r.diverged,
            "error": r.error,
        }));
    };
    let results = batch_generate(&queries, &cfg.target_rule(), bundle, &settings, workers, Some(&progress))?;
    Ok((results, settings.fingerprint()?))
}

pub fn generate(cfg: &RunConfig, workers: usize) -> Result<Value> {
    let bundle = load_bundle(&cfg.output.bundle_dir())?;
    let (results, fp) = run_generation(cfg, &bundle, workers)?;
    let dir = cfg.output.generation_dir();
    let summary = write_outputs(&dir, &results, &fp)?;
    cfg.write_resolved(&dir)?;
    Ok(json!({
        "event": "generated",
        "num_queries": summary.num_queries,
        "success_rate": summary.success_rate,
        "num_diverged": summary.num_diverged,
        "num_failed": summary.num_failed,
        "fingerprint": summary.fingerprint,
        "output": dir,
    }))
}

fn report(cfg: &RunConfig, bundle: &TrainedBundle, results: &[CFResult], fp: &str) -> Result<Value> {
    let test = load_test(&cfg.data)?;
    let cd = (cfg.metrics.cd_repeats > 0).then_some(CdSettings {
        test: &test,
        trainer: &cfg.classifier,
        repeats: cfg.metrics.cd_repeats,
        seed: cfg.metrics.cd_seed,
    });
    let (report, samples) = aggregate_report(results, bundle, cd, cfg.metrics.threshold, fp)?;
    write_report(&cfg.output.dir, &report, &samples)?;
    cfg.write_resolved(&cfg.output.dir)?;
    let mut v = serde_json::to_value(&report)?;
    v["event"] = json!("report");
    Ok(v)
}

pub fn evaluate(cfg: &RunConfig) -> Result<Value> {
    let bundle = load_bundle(&cfg.output.bundle_dir())?;
    let (summary, results) = load_outputs(&cfg.output.generation_dir())?;
    if results.is_empty() {
        return Err(DiscError::MissingArtifact("generation output lists no queries".into()));
    }
    report(cfg, &bundle, &results, &summary.fingerprint)
}

/// Generate X̄_1 and score it in one go.
pub fn discrepancy(cfg: &RunConfig, workers: usize) -> Result<Value> {
    let bundle = load_bundle(&cfg.output.bundle_dir())?;
    let (results, fp) = run_generation(cfg, &bundle, workers)?;
    write_outputs(&cfg.output.generation_dir(), &results, &fp)?;
    if results.is_empty() {
        return Err(DiscError::Data("no queries of the configured class".into()));
    }
    report(cfg, &bundle, &results, &fp)
}
