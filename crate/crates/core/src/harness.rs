//! Classification metrics, k-fold cross-validation and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::baseline::{train, BaselineNet, StackClassifier};
use crate::cascade::{
    improve_predictions, improve_training_set_report, run_algorithm1, CascadeMode, RecoveryReport,
};
use crate::config::RunConfig;
use crate::dataprep::{augment_training_set, Label, Task, TaskDataset, TripletSample};
use crate::error::{Error, Result};
use crate::explainer::{ExplainerConfig, MaskCorpus};
use crate::segmenter::{AttentionUNet, SegmentationScores, SegmenterReport};
use crate::stack::Stack;
use crate::training::{TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(labels: &[Label], predictions: &[Label]) -> Result<ConfusionCounts> {
    if labels.len() != predictions.len() {
        return Err(Error::LengthMismatch(labels.len(), predictions.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (Label::P, Label::P) => c.tp += 1,
            (Label::N, Label::P) => c.fp += 1,
            (Label::P, Label::N) => c.fn_ += 1,
            (Label::N, Label::N) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Single-fold metrics. A metric with an empty denominator is 0 and flagged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub auc: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub auc_undefined: bool,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["accuracy", "precision", "recall", "f_measure", "auc"];

    pub fn values(&self) -> [f64; 5] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f_measure,
            self.auc,
        ]
    }
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(c: &ConfusionCounts, labels: &[Label], scores: &[f64]) -> Result<Metrics> {
    if labels.len() != scores.len() {
        return Err(Error::LengthMismatch(labels.len(), scores.len()));
    }
    let (accuracy, _) = ratio(c.tp + c.tn, c.total());
    let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let (auc, auc_undefined) = match auc(labels, scores)? {
        Some(a) => (a, false),
        None => (0.0, true),
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f_measure,
        auc,
        precision_undefined,
        recall_undefined,
        auc_undefined,
    })
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct score
/// threshold (tied scores move both rates at once). Empty if a class is absent.
pub fn roc_curve(labels: &[Label], scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    if labels.len() != scores.len() {
        return Err(Error::LengthMismatch(labels.len(), scores.len()));
    }
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve; `None` if a class is absent.
pub fn auc(labels: &[Label], scores: &[f64]) -> Result<Option<f64>> {
    let roc = roc_curve(labels, scores)?;
    if roc.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        roc.windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum(),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd_population: f64,
    pub sd_sample: f64,
}

pub fn mean_sd(values: &[f64]) -> MeanSd {
    let n = values.len();
    if n == 0 {
        return MeanSd::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    MeanSd {
        mean,
        sd_population: (ss / n as f64).sqrt(),
        sd_sample: if n > 1 {
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        },
    }
}

/// What produced the scores being evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Baseline,
    Cascade(CascadeMode),
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Baseline => "baseline",
            EvalMode::Cascade(CascadeMode::LabelFree) => "cascade",
            EvalMode::Cascade(CascadeMode::LabelConditioned) => "cascade-label-conditioned",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(EvalMode::Baseline),
            "cascade" | "cascade-label-free" => Ok(EvalMode::Cascade(CascadeMode::LabelFree)),
            "cascade-label-conditioned" => Ok(EvalMode::Cascade(CascadeMode::LabelConditioned)),
            _ => Err(format!(
                "unknown mode `{s}` (expected baseline, cascade or cascade-label-conditioned)"
            )),
        }
    }
}

impl Serialize for EvalMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EvalMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Overlap between the training and test side of one fold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub train_samples: usize,
    pub test_samples: usize,
    pub shared_samples: usize,
    pub shared_volumes: usize,
}

impl LeakageAudit {
    /// Augmented copies carry their source id, so they are audited by source.
    pub fn of(train: &[&TripletSample], test: &[&TripletSample]) -> Self {
        let base = |id: &str| id.split('+').next().unwrap_or(id).to_string();
        let train_ids: BTreeSet<String> = train.iter().map(|s| base(&s.id)).collect();
        let train_vols: BTreeSet<&str> =
            train.iter().map(|s| s.source_volume_id.as_str()).collect();
        let test_vols: BTreeSet<&str> = test.iter().map(|s| s.source_volume_id.as_str()).collect();
        Self {
            train_samples: train.len(),
            test_samples: test.len(),
            shared_samples: test
                .iter()
                .filter(|s| train_ids.contains(&base(&s.id)))
                .count(),
            shared_volumes: test_vols.intersection(&train_vols).count(),
        }
    }

    pub fn is_clean(&self) -> bool {
        self.shared_samples == 0 && self.shared_volumes == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub confusion: ConfusionCounts,
    pub metrics: Metrics,
    pub roc: Vec<(f64, f64)>,
    pub leakage: LeakageAudit,
    /// Baseline confusion before the cascade (cascade modes only).
    pub initial_confusion: Option<ConfusionCounts>,
    pub recovery: Option<RecoveryReport>,
    /// Segmenter scores on its held-out corpus pairs (cascade modes only).
    pub segmentation: Option<SegmentationScores>,
}

impl FoldResult {
    /// Metrics of test-fold `scores` at the 0.5 threshold.
    pub fn new(
        fold: usize,
        train: &[&TripletSample],
        test: &[&TripletSample],
        scores: &[f64],
    ) -> Result<Self> {
        let leakage = LeakageAudit::of(train, test);
        if !leakage.is_clean() {
            return Err(Error::InvalidDataset(format!(
                "fold {fold} leaks training data: {leakage:?}"
            )));
        }
        let labels: Vec<Label> = test.iter().map(|s| s.label).collect();
        let preds: Vec<Label> = scores.iter().map(|&p| Label::from_probability(p)).collect();
        let c = confusion(&labels, &preds)?;
        Ok(Self {
            fold,
            confusion: c,
            metrics: metrics(&c, &labels, scores)?,
            roc: roc_curve(&labels, scores)?,
            leakage,
            initial_confusion: None,
            recovery: None,
            segmentation: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub mode: EvalMode,
    pub folds: Vec<FoldResult>,
    /// Per metric, over folds.
    pub summary: BTreeMap<String, MeanSd>,
}

impl MetricsReport {
    pub fn from_folds(task: Task, mode: EvalMode, mut folds: Vec<FoldResult>) -> Self {
        folds.sort_by_key(|f| f.fold);
        let mut summary = BTreeMap::new();
        for (i, name) in Metrics::NAMES.iter().enumerate() {
            let v: Vec<f64> = folds.iter().map(|f| f.metrics.values()[i]).collect();
            summary.insert(name.to_string(), mean_sd(&v));
        }
        Self {
            task,
            mode,
            folds,
            summary,
        }
    }
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

/// Train the classifier on every fold but `fold`, with one augmented copy per sample.
pub fn fit_baseline(
    ds: &TaskDataset,
    fold: usize,
    cfg: &RunConfig,
) -> Result<(BaselineNet<f32>, TrainLog)> {
    let seed = cfg.stage_seed("baseline", Some(ds.task), Some(fold));
    let mut aug = cfg.augmentation.clone();
    aug.seed = cfg.stage_seed("augment", Some(ds.task), Some(fold));
    let originals = ds.training_samples(fold);
    let augmented = augment_training_set(&originals, &aug);
    let train_refs: Vec<&TripletSample> = augmented.iter().collect();
    let mut net = BaselineNet::<f32>::build(&cfg.baseline, seed)?;
    let log = train(
        &mut net,
        ds.task,
        &train_refs,
        &[],
        &with_seed(&cfg.baseline_training, seed),
    )?;
    Ok((net, log))
}

pub fn fold_explainer_config(cfg: &RunConfig, task: Task, fold: usize) -> ExplainerConfig {
    ExplainerConfig {
        seed: cfg.stage_seed("explainer", Some(task), Some(fold)),
        ..cfg.explainer.clone()
    }
}

pub fn fold_segmenter_config(cfg: &RunConfig, task: Task, fold: usize) -> TrainConfig {
    with_seed(
        &cfg.segmenter_training,
        cfg.stage_seed("segmenter", Some(task), Some(fold)),
    )
}

/// Salient-region model from the training folds' true positives.
pub fn fit_segmenter(
    ds: &TaskDataset,
    fold: usize,
    baseline: &dyn StackClassifier,
    cfg: &RunConfig,
) -> Result<(MaskCorpus, AttentionUNet<f32>, SegmenterReport)> {
    run_algorithm1(
        &ds.training_samples(fold),
        baseline,
        &fold_explainer_config(cfg, ds.task, fold),
        &cfg.segmenter,
        &fold_segmenter_config(cfg, ds.task, fold),
        &cfg.segmenter_options,
    )
}

/// Evaluate one held-out fold; trains everything it needs.
pub fn run_fold(
    ds: &TaskDataset,
    fold: usize,
    cfg: &RunConfig,
    mode: EvalMode,
) -> Result<FoldResult> {
    let train_side = ds.training_samples(fold);
    let test = ds.fold_samples(fold);
    let (net, _) = fit_baseline(ds, fold, cfg)?;
    match mode {
        EvalMode::Baseline => {
            let stacks: Vec<&Stack> = test.iter().map(|s| &s.stack).collect();
            FoldResult::new(fold, &train_side, &test, &net.predict_batch(&stacks)?)
        }
        EvalMode::Cascade(cm) => {
            let (_, unet, seg) = fit_segmenter(ds, fold, &net, cfg)?;
            cascade_fold_result(fold, &train_side, &test, &net, &unet, cm, Some(seg.val))
        }
    }
}

/// Fold result from a trained classifier and segmenter.
pub fn cascade_fold_result(
    fold: usize,
    train_side: &[&TripletSample],
    test: &[&TripletSample],
    baseline: &dyn StackClassifier,
    unet: &AttentionUNet<f32>,
    mode: CascadeMode,
    segmentation: Option<SegmentationScores>,
) -> Result<FoldResult> {
    let decisions = improve_predictions(test, baseline, unet, mode)?;
    let finals: Vec<f64> = decisions.iter().map(|d| d.final_probability).collect();
    let mut r = FoldResult::new(fold, train_side, test, &finals)?;
    let labels: Vec<Label> = test.iter().map(|s| s.label).collect();
    let initial: Vec<Label> = decisions.iter().map(|d| d.initial_label).collect();
    r.initial_confusion = Some(confusion(&labels, &initial)?);
    r.recovery = Some(improve_training_set_report(test, &decisions, mode)?);
    r.segmentation = segmentation;
    Ok(r)
}

/// k-fold cross-validation; every fold retrains from scratch.
pub fn crossvalidate(ds: &TaskDataset, cfg: &RunConfig, mode: EvalMode) -> Result<MetricsReport> {
    let folds = (0..ds.k)
        .map(|f| {
            log::info!("{} {mode}: fold {}/{}", ds.task, f + 1, ds.k);
            run_fold(ds, f, cfg, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_folds(ds.task, mode, folds))
}

/// Published figures on real data, kept for side-by-side reading only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub task: Task,
    pub mode: String,
    pub metric: String,
    pub mean: f64,
    pub sd: Option<f64>,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    let row = |task, mode: &str, metric: &str, mean, sd| ReferenceRow {
        task,
        mode: mode.into(),
        metric: metric.into(),
        mean,
        sd,
    };
    vec![
        row(Task::Apex, "baseline", "accuracy", 94.51, Some(0.95)),
        row(Task::Basal, "baseline", "accuracy", 96.25, Some(0.51)),
        row(Task::Apex, "cascade", "accuracy", 95.72, Some(1.03)),
        row(Task::Basal, "cascade", "accuracy", 96.88, Some(0.38)),
        row(Task::Apex, "segmenter", "dice", 66.10, None),
        row(Task::Basal, "segmenter", "dice", 83.20, None),
        row(Task::Apex, "segmenter", "jaccard", 50.17, None),
        row(Task::Basal, "segmenter", "jaccard", 71.02, None),
        row(
            Task::Apex,
            "cascade-label-conditioned",
            "accuracy",
            97.22,
            None,
        ),
        row(
            Task::Apex,
            "cascade-label-conditioned",
            "precision",
            96.00,
            None,
        ),
        row(
            Task::Apex,
            "cascade-label-conditioned",
            "recall",
            98.55,
            None,
        ),
        row(
            Task::Basal,
            "cascade-label-conditioned",
            "accuracy",
            97.68,
            None,
        ),
        row(
            Task::Basal,
            "cascade-label-conditioned",
            "precision",
            96.93,
            None,
        ),
        row(
            Task::Basal,
            "cascade-label-conditioned",
            "recall",
            98.48,
            None,
        ),
        row(
            Task::Apex,
            "training-set",
            "misclassified_before",
            473.0,
            None,
        ),
        row(
            Task::Apex,
            "training-set",
            "misclassified_after",
            303.0,
            None,
        ),
        row(
            Task::Basal,
            "training-set",
            "misclassified_before",
            381.0,
            None,
        ),
        row(
            Task::Basal,
            "training-set",
            "misclassified_after",
            253.0,
            None,
        ),
    ]
}

#[derive(Serialize)]
struct ReportFile<'a> {
    reports: &'a [MetricsReport],
    /// UK Biobank figures; not reproducible from phantoms.
    reference: Vec<ReferenceRow>,
}

fn csv_fold_row(out: &mut String, r: &MetricsReport, f: &FoldResult) {
    let v = f.metrics.values();
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{:.5},{:.5},{:.5},{:.5},{:.5}",
        r.task,
        r.mode,
        f.fold,
        f.confusion.tp,
        f.confusion.fp,
        f.confusion.fn_,
        f.confusion.tn,
        v[0],
        v[1],
        v[2],
        v[3],
        v[4]
    ));
    match (&f.segmentation, &f.recovery) {
        (Some(s), Some(rec)) => out.push_str(&format!(
            ",{:.5},{:.5},{},{},{}\n",
            s.dice,
            s.jaccard,
            rec.misclassified_before,
            rec.misclassified_after,
            rec.recovery_display()
        )),
        (None, Some(rec)) => out.push_str(&format!(
            ",,,{},{},{}\n",
            rec.misclassified_before,
            rec.misclassified_after,
            rec.recovery_display()
        )),
        _ => out.push_str(",,,,,\n"),
    }
}

pub fn tables_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "task,mode,fold,tp,fp,fn,tn,accuracy,precision,recall,f_measure,auc,dice,jaccard,misclassified_before,misclassified_after,recovery\n",
    );
    for r in reports {
        for f in &r.folds {
            csv_fold_row(&mut out, r, f);
        }
        let cell = |name: &str, sample: bool| {
            let m = r.summary[name];
            format!(
                "{:.5}±{:.5}",
                m.mean,
                if sample { m.sd_sample } else { m.sd_population }
            )
        };
        for (label, sample) in [("Avg±SD", false), ("Avg±SD (sample)", true)] {
            let cells: Vec<String> = Metrics::NAMES.iter().map(|n| cell(n, sample)).collect();
            out.push_str(&format!(
                "{},{},{label},,,,,{},,,,,\n",
                r.task,
                r.mode,
                cells.join(",")
            ));
        }
    }
    out.push_str("\nreference (UK Biobank; not reproducible here)\ntask,mode,metric,mean,sd\n");
    for row in reference_rows() {
        let sd = row.sd.map(|s| format!("{s:.2}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:.2},{sd}\n",
            row.task, row.mode, row.metric, row.mean
        ));
    }
    out
}

/// Reports already in `dir/report.json`; empty when there is none.
pub fn load_reports(dir: &Path) -> Result<Vec<MetricsReport>> {
    #[derive(Deserialize)]
    struct Stored {
        reports: Vec<MetricsReport>,
    }
    let path = dir.join("report.json");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let stored: Stored = serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e))?;
    Ok(stored.reports)
}

/// `report.json`, `tables.csv` and `<task>-<mode>/roc_fold<i>.png` under `dir`.
pub fn emit_report(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidDataset("no reports to emit".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = ReportFile {
        reports,
        reference: reference_rows(),
    };
    let json = serde_json::to_string_pretty(&file).expect("report serializes") + "\n";
    let path = dir.join("report.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("tables.csv");
    std::fs::write(&path, tables_csv(reports)).map_err(|e| Error::io(&path, e))?;
    for r in reports {
        let sub = dir.join(format!("{}-{}", r.task, r.mode));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for f in &r.folds {
            let path = sub.join(format!("roc_fold{}.png", f.fold));
            roc_image(&f.roc)
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        }
    }
    Ok(())
}

const PLOT: u32 = 200;
const MARGIN: u32 = 20;

fn draw_line(
    img: &mut RgbImage,
    (x0, y0): (i64, i64),
    (x1, y1): (i64, i64),
    color: Rgb<u8>,
    dashed: bool,
) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err, mut step) = (x0, y0, dx + dy, 0u32);
    loop {
        if (!dashed || (step / 4) % 2 == 0)
            && x >= 0
            && y >= 0
            && (x as u32) < img.width()
            && (y as u32) < img.height()
        {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        step += 1;
    }
}

/// ROC curve on a white square with axes and the chance diagonal.
pub fn roc_image(roc: &[(f64, f64)]) -> RgbImage {
    let side = PLOT + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    let px = |(fpr, tpr): (f64, f64)| {
        (
            MARGIN as i64 + (fpr.clamp(0.0, 1.0) * PLOT as f64).round() as i64,
            (MARGIN + PLOT) as i64 - (tpr.clamp(0.0, 1.0) * PLOT as f64).round() as i64,
        )
    };
    let black = Rgb([0, 0, 0]);
    draw_line(&mut img, px((0.0, 0.0)), px((1.0, 0.0)), black, false);
    draw_line(&mut img, px((0.0, 0.0)), px((0.0, 1.0)), black, false);
    draw_line(
        &mut img,
        px((0.0, 0.0)),
        px((1.0, 1.0)),
        Rgb([160, 160, 160]),
        true,
    );
    for w in roc.windows(2) {
        draw_line(&mut img, px(w[0]), px(w[1]), Rgb([20, 60, 200]), false);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{N, P};

    #[test]
    fn hand_counted_confusion() {
        let c = confusion(&[P, P, N, N, P, N], &[P, P, P, N, N, N]).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 2,
                fp: 1,
                fn_: 1,
                tn: 2
            }
        );
        assert_eq!(confusion(&[], &[]).unwrap(), ConfusionCounts::default());
        assert!(matches!(
            confusion(&[P], &[]),
            Err(Error::LengthMismatch(1, 0))
        ));
    }

    #[test]
    fn hand_evaluated_metrics() {
        let c = ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 0,
            tn: 2,
        };
        let labels = [P, P, P, N, N, N];
        let scores = [0.9, 0.8, 0.7, 0.6, 0.2, 0.1];
        let m = metrics(&c, &labels, &scores).unwrap();
        assert!((m.accuracy - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 1.0).abs() < 1e-12);
        assert!((m.f_measure - 2.0 * 0.75 / 1.75).abs() < 1e-12);
        assert_eq!(m.auc, 1.0);
    }

    #[test]
    fn empty_denominators_are_flagged() {
        let c = ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 3,
        };
        let m = metrics(&c, &[N, N, N], &[0.1, 0.2, 0.3]).unwrap();
        assert!(m.precision_undefined && m.recall_undefined && m.auc_undefined);
        assert_eq!(
            (m.precision, m.recall, m.f_measure, m.auc),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    /// Mann-Whitney: share of (positive, negative) pairs ranked correctly, ties counted half.
    fn pair_auc(labels: &[Label], scores: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                if *li == P && *lj == N {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn trapezoid_matches_pair_counting_with_ties() {
        let labels = [P, N, P, N, P, N, N];
        let scores = [0.8, 0.8, 0.5, 0.3, 0.3, 0.3, 0.9];
        let a = auc(&labels, &scores).unwrap().unwrap();
        assert!((a - pair_auc(&labels, &scores)).abs() < 1e-12);
    }

    #[test]
    fn coin_scores_give_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let labels: Vec<Label> = (0..4000).map(|i| if i % 2 == 0 { P } else { N }).collect();
        let scores: Vec<f64> = labels.iter().map(|_| rng.random()).collect();
        let a = auc(&labels, &scores).unwrap().unwrap();
        assert!((a - 0.5).abs() < 0.05, "{a}");
    }

    #[test]
    fn population_and_sample_sd() {
        let m = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.sd_population - 1.25f64.sqrt()).abs() < 1e-12);
        assert!((m.sd_sample - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_sd(&[0.7]).sd_sample, 0.0);
    }

    #[test]
    fn eval_mode_strings() {
        for m in [
            EvalMode::Baseline,
            EvalMode::Cascade(CascadeMode::LabelFree),
            EvalMode::Cascade(CascadeMode::LabelConditioned),
        ] {
            assert_eq!(m.as_str().parse::<EvalMode>().unwrap(), m);
            let j = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<EvalMode>(&j).unwrap(), m);
        }
    }

    fn fake_report(folds: usize) -> MetricsReport {
        let labels = [P, P, N, N];
        let fr = (0..folds)
            .map(|f| {
                let scores = [0.9, 0.4 + 0.05 * f as f64, 0.2, 0.6];
                let preds: Vec<Label> =
                    scores.iter().map(|&p| Label::from_probability(p)).collect();
                let c = confusion(&labels, &preds).unwrap();
                FoldResult {
                    fold: f,
                    confusion: c,
                    metrics: metrics(&c, &labels, &scores).unwrap(),
                    roc: roc_curve(&labels, &scores).unwrap(),
                    leakage: LeakageAudit::default(),
                    initial_confusion: None,
                    recovery: None,
                    segmentation: None,
                }
            })
            .collect();
        MetricsReport::from_folds(Task::Apex, EvalMode::Baseline, fr)
    }

    #[test]
    fn table_shape() {
        let one = tables_csv(&[fake_report(1)]);
        let five = tables_csv(&[fake_report(5)]);
        let rows = |s: &str| {
            let (ours, _) = s.split_once("\nreference").unwrap();
            ours.lines()
                .filter(|l| l.starts_with("apex,baseline,"))
                .count()
        };
        // fold rows plus mean±population SD and mean±sample SD
        assert_eq!(rows(&one), 1 + 2);
        assert_eq!(rows(&five), 5 + 2);
        assert!(five.contains("apex,baseline,Avg±SD,"));
        assert!(five.contains("reference (UK Biobank"));
    }

    #[test]
    fn emitted_bytes_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let r = [fake_report(3)];
        emit_report(a.path(), &r).unwrap();
        emit_report(b.path(), &r).unwrap();
        for f in [
            "report.json",
            "tables.csv",
            "apex-baseline/roc_fold0.png",
            "apex-baseline/roc_fold2.png",
        ] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let img = image::open(a.path().join("apex-baseline/roc_fold0.png")).unwrap();
        assert_eq!(img.width(), PLOT + 2 * MARGIN);
    }

    #[test]
    fn leakage_audit_sees_augmented_copies() {
        let s = |id: &str, vol: &str| TripletSample {
            id: id.into(),
            stack: Stack::zeros(2),
            label: P,
            task: Task::Apex,
            source_volume_id: vol.into(),
            slice_indices: [1, 2, 3],
        };
        let train = [s("a", "v1"), s("b+aug", "v2")];
        let test = [s("b", "v2")];
        let audit = LeakageAudit::of(
            &train.iter().collect::<Vec<_>>(),
            &test.iter().collect::<Vec<_>>(),
        );
        assert_eq!(audit.shared_samples, 1);
        assert_eq!(audit.shared_volumes, 1);
        assert!(!audit.is_clean());
    }
}
