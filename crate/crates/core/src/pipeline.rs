//! Run-directory stages behind the command-line tool.
//!
//! ```text
//! <out>/runs/<run_id>/
//!   run.json
//!   dataset/        manifest.jsonl, tensors/
//!   checkpoints/    <task>/fold<i>/{baseline.ckpt, baseline_log.csv, unet.ckpt, unet_report.json, unet_log.csv}
//!   masks/          <task>/fold<i>/ explainer corpus
//!   decisions/      <task>/fold<i>/{<mode>.jsonl, <mode>_recovery.json, <mode>_train_recovery.json}
//!   report/         report.json, tables.csv, <task>-<mode>/roc_fold<i>.png
//! ```
//!
//! Every stage reads `run.json`, so a rerun of the same stages reproduces
//! the same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineNet, StackClassifier};
use crate::cascade::{
    improve_predictions, improve_training_set_report, read_decisions, write_decisions, CascadeMode,
};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataprep::{
    extract_triplets, generate_phantoms, load_volume_ordered, make_folds, Label, Task, TaskDataset,
};
use crate::error::{Error, Result};
use crate::explainer::{build_mask_corpus, load_corpus, save_corpus};
use crate::harness::{
    confusion, emit_report, fit_baseline, fold_explainer_config, fold_segmenter_config,
    load_reports, EvalMode, FoldResult, MetricsReport,
};
use crate::manifest::{manifest_hash, read_dataset, write_dataset, MANIFEST_FILE};
use crate::segmenter::{train_unet as fit_unet, AttentionUNet, SegmenterReport};
use crate::stack::Stack;

pub const RUN_CONFIG_FILE: &str = "run.json";

/// Which held-out folds a stage works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSelection {
    One(usize),
    All,
}

impl FoldSelection {
    pub fn resolve(self, k: usize) -> Result<Vec<usize>> {
        match self {
            FoldSelection::All => Ok((0..k).collect()),
            FoldSelection::One(f) if f < k => Ok(vec![f]),
            FoldSelection::One(f) => Err(Error::InvalidDataset(format!(
                "test fold {f} out of range for {k} folds"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(out: &Path, run_id: &str) -> Self {
        Self {
            root: out.join("runs").join(run_id),
        }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(RUN_CONFIG_FILE)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn fold_dir(&self, area: &str, task: Task, fold: usize) -> PathBuf {
        self.root
            .join(area)
            .join(task.as_str())
            .join(format!("fold{fold}"))
    }

    pub fn baseline_path(&self, task: Task, fold: usize) -> PathBuf {
        self.fold_dir("checkpoints", task, fold)
            .join("baseline.ckpt")
    }

    pub fn unet_path(&self, task: Task, fold: usize) -> PathBuf {
        self.fold_dir("checkpoints", task, fold).join("unet.ckpt")
    }

    pub fn unet_report_path(&self, task: Task, fold: usize) -> PathBuf {
        self.fold_dir("checkpoints", task, fold)
            .join("unet_report.json")
    }

    pub fn masks_dir(&self, task: Task, fold: usize) -> PathBuf {
        self.fold_dir("masks", task, fold)
    }

    pub fn decisions_path(&self, task: Task, fold: usize, mode: CascadeMode) -> PathBuf {
        self.fold_dir("decisions", task, fold)
            .join(format!("{mode}.jsonl"))
    }

    /// Load `run.json`; the run must have been prepared.
    pub fn load_config(&self) -> Result<RunConfig> {
        let path = self.config_path();
        require(&path, "prepare")?;
        RunConfig::load(&path)
    }

    pub fn load_dataset(&self, task: Task) -> Result<TaskDataset> {
        require(&self.dataset_dir().join(MANIFEST_FILE), "prepare")?;
        read_dataset(&self.dataset_dir(), task)
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub run_dir: PathBuf,
    pub volumes: usize,
    pub triplets: BTreeMap<String, usize>,
    pub manifest_sha256: String,
}

fn volume_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.to_string_lossy();
        if path.is_file()
            && (name.ends_with(".nii") || name.ends_with(".nii.gz") || name.ends_with(".raw"))
        {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no .nii, .nii.gz or .raw volumes in {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Build the per-task datasets (phantoms, or every volume in `data.input_dir`).
pub fn build_datasets(cfg: &RunConfig) -> Result<(usize, Vec<TaskDataset>)> {
    let size = cfg.data.target_size;
    let volumes = match &cfg.data.input_dir {
        Some(dir) if dir.is_file() => vec![load_volume_ordered(
            dir,
            cfg.data.normalization,
            cfg.data.slice_order,
        )?],
        Some(dir) => volume_files(dir)?
            .iter()
            .map(|p| load_volume_ordered(p, cfg.data.normalization, cfg.data.slice_order))
            .collect::<Result<Vec<_>>>()?,
        None => generate_phantoms(
            cfg.data.phantom_count,
            cfg.phantom_seed(),
            &cfg.data.phantom,
        )?
        .into_iter()
        .map(|p| p.volume)
        .collect(),
    };
    let mut per_task: BTreeMap<Task, Vec<_>> = BTreeMap::new();
    for v in &volumes {
        for t in extract_triplets(v, size)? {
            per_task.entry(t.task).or_default().push(t);
        }
    }
    let datasets = cfg
        .tasks()
        .into_iter()
        .map(|task| {
            let samples = per_task.remove(&task).unwrap_or_default();
            make_folds(
                samples,
                cfg.data.folds,
                cfg.stage_seed("folds", Some(task), None),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((volumes.len(), datasets))
}

/// Write `run.json` and the dataset for a fresh run directory.
pub fn prepare(cfg: &RunConfig, out: &Path) -> Result<PrepareSummary> {
    cfg.validate()?;
    let (volumes, datasets) = build_datasets(cfg)?;
    let run = RunDir::new(out, &cfg.run_id);
    let dataset_dir = run.dataset_dir();
    if dataset_dir.exists() {
        std::fs::remove_dir_all(&dataset_dir).map_err(|e| Error::io(&dataset_dir, e))?;
    }
    create_dir(&dataset_dir)?;
    cfg.save(&run.config_path())?;
    let hash = write_dataset(&dataset_dir, &datasets)?;
    Ok(PrepareSummary {
        run_dir: run.root,
        volumes,
        triplets: datasets
            .iter()
            .map(|d| (d.task.to_string(), d.samples.len()))
            .collect(),
        manifest_sha256: hash,
    })
}

/// Fingerprint of the prepared dataset.
pub fn dataset_hash(run: &RunDir) -> Result<String> {
    require(&run.dataset_dir().join(MANIFEST_FILE), "prepare")?;
    manifest_hash(&run.dataset_dir())
}

fn load_baseline(
    run: &RunDir,
    cfg: &RunConfig,
    task: Task,
    fold: usize,
) -> Result<BaselineNet<f32>> {
    let path = run.baseline_path(task, fold);
    require(&path, "train-baseline")?;
    BaselineNet::from_checkpoint_expecting(&Checkpoint::load(&path)?, task, &cfg.baseline)
}

fn load_unet(run: &RunDir, cfg: &RunConfig, task: Task, fold: usize) -> Result<AttentionUNet<f32>> {
    let path = run.unet_path(task, fold);
    require(&path, "train-unet")?;
    AttentionUNet::from_checkpoint_expecting(&Checkpoint::load(&path)?, task, &cfg.segmenter)
}

/// Train one classifier per selected held-out fold; returns checkpoint paths.
pub fn train_baseline(run: &RunDir, tasks: &[Task], folds: FoldSelection) -> Result<Vec<PathBuf>> {
    let cfg = run.load_config()?;
    let mut written = Vec::new();
    for &task in tasks {
        let ds = run.load_dataset(task)?;
        for fold in folds.resolve(ds.k)? {
            log::info!("{task} fold {fold}: training baseline");
            let (net, log) = fit_baseline(&ds, fold, &cfg)?;
            let test = ds.fold_samples(fold);
            let stacks: Vec<&Stack> = test.iter().map(|s| &s.stack).collect();
            let probs = net.predict_batch(&stacks)?;
            let correct = test
                .iter()
                .zip(&probs)
                .filter(|(s, &p)| Label::from_probability(p) == s.label)
                .count();
            let mut metrics = BTreeMap::new();
            metrics.insert(
                "final_train_loss".into(),
                log.last_loss().unwrap_or(f64::NAN),
            );
            metrics.insert(
                "test_accuracy".into(),
                correct as f64 / test.len().max(1) as f64,
            );
            let path = run.baseline_path(task, fold);
            create_dir(path.parent().expect("fold directory"))?;
            let train_cfg = crate::training::TrainConfig {
                seed: cfg.stage_seed("baseline", Some(task), Some(fold)),
                ..cfg.baseline_training.clone()
            };
            net.to_checkpoint(task, &train_cfg, metrics).save(&path)?;
            log.write_csv(&path.with_file_name("baseline_log.csv"), "accuracy")?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Explain the training folds' true positives; returns the number of pairs per fold.
pub fn explain(
    run: &RunDir,
    tasks: &[Task],
    folds: FoldSelection,
) -> Result<Vec<(Task, usize, usize)>> {
    let cfg = run.load_config()?;
    let mut out = Vec::new();
    for &task in tasks {
        let ds = run.load_dataset(task)?;
        for fold in folds.resolve(ds.k)? {
            let net = load_baseline(run, &cfg, task, fold)?;
            log::info!("{task} fold {fold}: explaining true positives");
            let corpus = build_mask_corpus(
                &ds.training_samples(fold),
                &net,
                &fold_explainer_config(&cfg, task, fold),
            )?;
            let dir = run.masks_dir(task, fold);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            save_corpus(&corpus, &dir)?;
            out.push((task, fold, corpus.pairs.len()));
        }
    }
    Ok(out)
}

/// Fit the segmenter to each fold's mask corpus.
pub fn train_unet(
    run: &RunDir,
    tasks: &[Task],
    folds: FoldSelection,
) -> Result<Vec<(Task, usize, SegmenterReport)>> {
    let cfg = run.load_config()?;
    let mut out = Vec::new();
    for &task in tasks {
        let ds = run.load_dataset(task)?;
        for fold in folds.resolve(ds.k)? {
            let dir = run.masks_dir(task, fold);
            require(&dir.join("index.json"), "explain")?;
            let corpus = load_corpus(&dir)?;
            log::info!(
                "{task} fold {fold}: training segmenter on {} pairs",
                corpus.pairs.len()
            );
            let train_cfg = fold_segmenter_config(&cfg, task, fold);
            let (net, report) =
                fit_unet(&corpus, &cfg.segmenter, &train_cfg, &cfg.segmenter_options)?;
            let mut metrics = BTreeMap::new();
            metrics.insert("val_dice".into(), report.val.dice);
            metrics.insert("val_jaccard".into(), report.val.jaccard);
            let path = run.unet_path(task, fold);
            create_dir(path.parent().expect("fold directory"))?;
            net.to_checkpoint(task, &train_cfg, metrics).save(&path)?;
            write_json(&run.unet_report_path(task, fold), &report)?;
            report
                .log
                .write_csv(&path.with_file_name("unet_log.csv"), "dice")?;
            out.push((task, fold, report));
        }
    }
    Ok(out)
}

/// Re-predict held-out negatives on their salient region and write the audit trail.
pub fn cascade(
    run: &RunDir,
    tasks: &[Task],
    folds: FoldSelection,
    mode: CascadeMode,
) -> Result<Vec<PathBuf>> {
    let cfg = run.load_config()?;
    let mut written = Vec::new();
    for &task in tasks {
        let ds = run.load_dataset(task)?;
        for fold in folds.resolve(ds.k)? {
            let net = load_baseline(run, &cfg, task, fold)?;
            let unet = load_unet(run, &cfg, task, fold)?;
            log::info!("{task} fold {fold}: cascade ({mode})");
            let test = ds.fold_samples(fold);
            let decisions = improve_predictions(&test, &net, &unet, mode)?;
            let path = run.decisions_path(task, fold, mode);
            create_dir(path.parent().expect("fold directory"))?;
            write_decisions(&path, &decisions)?;
            write_json(
                &path.with_file_name(format!("{mode}_recovery.json")),
                &improve_training_set_report(&test, &decisions, mode)?,
            )?;
            let train = ds.training_samples(fold);
            let train_decisions = improve_predictions(&train, &net, &unet, mode)?;
            write_json(
                &path.with_file_name(format!("{mode}_train_recovery.json")),
                &improve_training_set_report(&train, &train_decisions, mode)?,
            )?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Score the selected folds from stored artifacts and write the report.
pub fn evaluate(
    run: &RunDir,
    tasks: &[Task],
    folds: FoldSelection,
    mode: EvalMode,
) -> Result<Vec<MetricsReport>> {
    let cfg = run.load_config()?;
    let mut reports = Vec::new();
    for &task in tasks {
        let ds = run.load_dataset(task)?;
        let mut results = Vec::new();
        for fold in folds.resolve(ds.k)? {
            let train = ds.training_samples(fold);
            let test = ds.fold_samples(fold);
            let net = load_baseline(run, &cfg, task, fold)?;
            let result = match mode {
                EvalMode::Baseline => {
                    let stacks: Vec<&Stack> = test.iter().map(|s| &s.stack).collect();
                    FoldResult::new(fold, &train, &test, &net.predict_batch(&stacks)?)?
                }
                EvalMode::Cascade(cm) => {
                    load_unet(run, &cfg, task, fold)?;
                    let path = run.decisions_path(task, fold, cm);
                    require(&path, "cascade")?;
                    let decisions = read_decisions(&path)?;
                    let seg: SegmenterReport = read_json(&run.unet_report_path(task, fold))?;
                    let finals: Vec<f64> = decisions.iter().map(|d| d.final_probability).collect();
                    if finals.len() != test.len() {
                        return Err(Error::malformed(
                            &path,
                            format!("{} decisions for {} samples", finals.len(), test.len()),
                        ));
                    }
                    let mut r = FoldResult::new(fold, &train, &test, &finals)?;
                    let labels: Vec<Label> = test.iter().map(|s| s.label).collect();
                    let initial: Vec<Label> = decisions.iter().map(|d| d.initial_label).collect();
                    r.initial_confusion = Some(confusion(&labels, &initial)?);
                    r.recovery = Some(improve_training_set_report(&test, &decisions, cm)?);
                    r.segmentation = Some(seg.val);
                    r
                }
            };
            results.push(result);
        }
        reports.push(MetricsReport::from_folds(task, mode, results));
    }
    // keep earlier evaluations of other tasks or modes
    let mut all = load_reports(&run.report_dir())?;
    all.retain(|old| {
        !reports
            .iter()
            .any(|r| r.task == old.task && r.mode == old.mode)
    });
    all.extend(reports.iter().cloned());
    all.sort_by(|a, b| (a.task, a.mode.as_str()).cmp(&(b.task, b.mode.as_str())));
    emit_report(&run.report_dir(), &all)?;
    Ok(reports)
}
