//! Salient-region detection (explain true positives, learn their masks) and
//! baseline improvement (re-predict negatives on their salient region).

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseline::StackClassifier;
use crate::dataprep::{Label, Task, TripletSample};
use crate::error::{Error, Result};
use crate::explainer::{build_mask_corpus, ExplainerConfig, MaskCorpus};
use crate::segmenter::{
    apply_salient_region, train_unet, AttentionUNet, SegmenterReport, SegmenterTrainOptions,
    UNetSpec,
};
use crate::stack::{Mask, Stack};
use crate::training::TrainConfig;

/// Anything that proposes a salient region for a stack.
pub trait SalientRegion {
    fn salient_masks(&self, stacks: &[&Stack]) -> Result<Vec<Mask>>;
}

impl SalientRegion for AttentionUNet<f32> {
    fn salient_masks(&self, stacks: &[&Stack]) -> Result<Vec<Mask>> {
        self.predict_masks(stacks)
    }
}

/// Adapts a plain mask function.
pub struct FnRegion<F>(pub F);

impl<F: Fn(&Stack) -> Mask> SalientRegion for FnRegion<F> {
    fn salient_masks(&self, stacks: &[&Stack]) -> Result<Vec<Mask>> {
        Ok(stacks.iter().map(|s| (self.0)(s)).collect())
    }
}

/// Which negatives get a second look.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CascadeMode {
    /// Every negative prediction is re-predicted; no labels are consulted.
    #[default]
    LabelFree,
    /// Only negatives whose ground truth is `P` are re-predicted. Uses labels,
    /// so it is an evaluation protocol, not something deployable.
    LabelConditioned,
}

impl CascadeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CascadeMode::LabelFree => "label-free",
            CascadeMode::LabelConditioned => "label-conditioned",
        }
    }
}

impl fmt::Display for CascadeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CascadeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "label-free" => Ok(CascadeMode::LabelFree),
            "label-conditioned" => Ok(CascadeMode::LabelConditioned),
            _ => Err(format!(
                "unknown cascade mode `{s}` (expected label-free or label-conditioned)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeDecision {
    pub sample_id: String,
    pub initial_probability: f64,
    pub initial_label: Label,
    pub reprediction_applied: bool,
    pub final_probability: f64,
    pub final_label: Label,
}

/// Explain the true positives among `train` and fit a U-Net to their masks.
pub fn run_algorithm1(
    train: &[&TripletSample],
    baseline: &dyn StackClassifier,
    explainer: &ExplainerConfig,
    unet: &UNetSpec,
    unet_training: &TrainConfig,
    options: &SegmenterTrainOptions,
) -> Result<(MaskCorpus, AttentionUNet<f32>, SegmenterReport)> {
    let corpus = build_mask_corpus(train, baseline, explainer)?;
    let (net, report) = train_unet(&corpus, unet, unet_training, options)?;
    Ok((corpus, net, report))
}

/// One decision per sample, in input order.
pub fn improve_predictions(
    samples: &[&TripletSample],
    baseline: &dyn StackClassifier,
    region: &dyn SalientRegion,
    mode: CascadeMode,
) -> Result<Vec<CascadeDecision>> {
    if let Some(s) = samples.windows(2).find(|w| w[0].task != w[1].task) {
        return Err(Error::InvalidDataset(format!("{} mixes tasks", s[1].id)));
    }
    let stacks: Vec<&Stack> = samples.iter().map(|s| &s.stack).collect();
    let initial = baseline.predict_batch(&stacks)?;
    if initial.len() != samples.len() {
        return Err(Error::LengthMismatch(samples.len(), initial.len()));
    }
    let retry: Vec<usize> = (0..samples.len())
        .filter(|&i| {
            Label::from_probability(initial[i]) == Label::N
                && (mode == CascadeMode::LabelFree || samples[i].label == Label::P)
        })
        .collect();
    let retry_stacks: Vec<&Stack> = retry.iter().map(|&i| stacks[i]).collect();
    let masks = region.salient_masks(&retry_stacks)?;
    let masked = retry_stacks
        .iter()
        .zip(&masks)
        .map(|(s, m)| apply_salient_region(s, m))
        .collect::<Result<Vec<_>>>()?;
    let second = baseline.predict_batch(&masked.iter().collect::<Vec<_>>())?;

    let mut decisions: Vec<CascadeDecision> = samples
        .iter()
        .zip(&initial)
        .map(|(s, &p)| CascadeDecision {
            sample_id: s.id.clone(),
            initial_probability: p,
            initial_label: Label::from_probability(p),
            reprediction_applied: false,
            final_probability: p,
            final_label: Label::from_probability(p),
        })
        .collect();
    for (&i, &p) in retry.iter().zip(&second) {
        let d = &mut decisions[i];
        d.reprediction_applied = true;
        d.final_probability = p;
        d.final_label = Label::from_probability(p);
    }
    Ok(decisions)
}

pub fn write_decisions(path: &Path, decisions: &[CascadeDecision]) -> Result<()> {
    let mut out = Vec::new();
    for d in decisions {
        serde_json::to_writer(&mut out, d).expect("decision serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_decisions(path: &Path) -> Result<Vec<CascadeDecision>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::malformed(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// Misclassification before and after the cascade on a labelled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub task: Task,
    pub mode: CascadeMode,
    pub samples: usize,
    pub misclassified_before: usize,
    pub misclassified_after: usize,
    pub false_negatives_before: usize,
    pub false_negatives_after: usize,
    /// Misclassified before, correct after.
    pub recovered: usize,
    /// Correct before, misclassified after (true negatives that flipped).
    pub newly_misclassified: usize,
    /// `recovered / misclassified_before`; `None` when nothing was misclassified.
    pub recovery_fraction: Option<f64>,
}

impl RecoveryReport {
    /// Recovery fraction as a percentage, or `n/a`.
    pub fn recovery_display(&self) -> String {
        match self.recovery_fraction {
            Some(f) => format!("{:.2}%", 100.0 * f),
            None => "n/a".to_string(),
        }
    }
}

pub fn improve_training_set_report(
    samples: &[&TripletSample],
    decisions: &[CascadeDecision],
    mode: CascadeMode,
) -> Result<RecoveryReport> {
    if samples.len() != decisions.len() {
        return Err(Error::LengthMismatch(samples.len(), decisions.len()));
    }
    let task = samples.first().map(|s| s.task).unwrap_or(Task::Apex);
    let mut r = RecoveryReport {
        task,
        mode,
        samples: samples.len(),
        misclassified_before: 0,
        misclassified_after: 0,
        false_negatives_before: 0,
        false_negatives_after: 0,
        recovered: 0,
        newly_misclassified: 0,
        recovery_fraction: None,
    };
    for (s, d) in samples.iter().zip(decisions) {
        if s.id != d.sample_id {
            return Err(Error::InvalidDataset(format!(
                "decision for {} paired with sample {}",
                d.sample_id, s.id
            )));
        }
        let before = d.initial_label != s.label;
        let after = d.final_label != s.label;
        r.misclassified_before += usize::from(before);
        r.misclassified_after += usize::from(after);
        let positive = s.label == Label::P;
        r.false_negatives_before += usize::from(positive && before);
        r.false_negatives_after += usize::from(positive && after);
        r.recovered += usize::from(before && !after);
        r.newly_misclassified += usize::from(!before && after);
    }
    if r.misclassified_before > 0 {
        r.recovery_fraction = Some(r.recovered as f64 / r.misclassified_before as f64);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::FnClassifier;

    fn sample(i: usize, label: Label, v: f32) -> TripletSample {
        let mut data = vec![0.0; 3 * 4 * 4];
        data[0] = v;
        data[5] = 1.0; // clutter the salient region removes
        TripletSample {
            id: format!("s{i}"),
            stack: Stack::new(4, data).unwrap(),
            label,
            task: Task::Apex,
            source_volume_id: format!("v{i}"),
            slice_indices: [1, 2, 3],
        }
    }

    /// Scores the corner voxel, halved by the clutter voxel.
    fn scorer(s: &Stack) -> f64 {
        let v = s.data()[0] as f64;
        if s.data()[5] > 0.0 {
            v * 0.5
        } else {
            v
        }
    }

    fn corner_only(s: &Stack) -> Mask {
        let mut bits = vec![false; s.data().len()];
        bits[0] = true;
        Mask::new(s.size(), bits).unwrap()
    }

    fn fixture() -> Vec<TripletSample> {
        vec![
            sample(0, Label::P, 1.6), // TP
            sample(1, Label::P, 0.8), // FN, recovered by masking
            sample(2, Label::P, 0.2), // FN, stays N
            sample(3, Label::N, 0.1), // TN
            sample(4, Label::N, 0.7), // TN that flips to P
            sample(5, Label::N, 1.4), // FP
        ]
    }

    #[test]
    fn positives_untouched_negatives_repredicted() {
        let s = fixture();
        let refs: Vec<&TripletSample> = s.iter().collect();
        let d = improve_predictions(
            &refs,
            &FnClassifier(scorer),
            &FnRegion(corner_only),
            CascadeMode::LabelFree,
        )
        .unwrap();
        assert_eq!(d.len(), 6);
        for x in &d {
            assert_eq!(x.reprediction_applied, x.initial_label == Label::N);
            if x.initial_label == Label::P {
                assert_eq!(x.final_label, Label::P);
                assert_eq!(x.final_probability, x.initial_probability);
            }
        }
        let finals: Vec<Label> = d.iter().map(|x| x.final_label).collect();
        assert_eq!(
            finals,
            [Label::P, Label::P, Label::N, Label::N, Label::P, Label::P]
        );
        assert!((d[1].initial_probability - 0.4).abs() < 1e-6);
        assert!((d[1].final_probability - 0.8).abs() < 1e-6);
    }

    #[test]
    fn label_conditioned_only_touches_ground_truth_positives() {
        let s = fixture();
        let refs: Vec<&TripletSample> = s.iter().collect();
        let d = improve_predictions(
            &refs,
            &FnClassifier(scorer),
            &FnRegion(corner_only),
            CascadeMode::LabelConditioned,
        )
        .unwrap();
        assert!(d[1].reprediction_applied && d[2].reprediction_applied);
        assert!(!d[3].reprediction_applied && !d[4].reprediction_applied);
        assert_eq!(d[4].final_label, Label::N);
    }

    #[test]
    fn recovery_counts() {
        let s = fixture();
        let refs: Vec<&TripletSample> = s.iter().collect();
        let d = improve_predictions(
            &refs,
            &FnClassifier(scorer),
            &FnRegion(corner_only),
            CascadeMode::LabelFree,
        )
        .unwrap();
        let r = improve_training_set_report(&refs, &d, CascadeMode::LabelFree).unwrap();
        // before: s1, s2 are FN and s5 is FP; after: s1 fixed, s4 flipped
        assert_eq!(r.false_negatives_before, 2);
        assert_eq!(r.false_negatives_after, 1);
        assert_eq!(r.misclassified_before, 3);
        assert_eq!(r.recovered, 1);
        assert_eq!(r.newly_misclassified, 1);
        assert_eq!(r.misclassified_after, 3);
        assert!((r.recovery_fraction.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_baseline_reports_na() {
        let s = vec![sample(0, Label::P, 1.6), sample(1, Label::N, 0.1)];
        let refs: Vec<&TripletSample> = s.iter().collect();
        let d = improve_predictions(
            &refs,
            &FnClassifier(scorer),
            &FnRegion(corner_only),
            CascadeMode::LabelFree,
        )
        .unwrap();
        let r = improve_training_set_report(&refs, &d, CascadeMode::LabelFree).unwrap();
        assert_eq!(r.misclassified_before, 0);
        assert_eq!(r.recovery_fraction, None);
        assert_eq!(r.recovery_display(), "n/a");
    }

    #[test]
    fn decisions_round_trip_as_json_lines() {
        let s = fixture();
        let refs: Vec<&TripletSample> = s.iter().collect();
        let d = improve_predictions(
            &refs,
            &FnClassifier(scorer),
            &FnRegion(corner_only),
            CascadeMode::LabelFree,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_decisions(&p, &d).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap().lines().count(),
            d.len()
        );
        assert_eq!(read_decisions(&p).unwrap(), d);
    }

    #[test]
    fn mixed_tasks_rejected() {
        let a = sample(0, Label::P, 0.9);
        let mut b = sample(1, Label::P, 0.9);
        b.task = Task::Basal;
        assert!(matches!(
            improve_predictions(
                &[&a, &b],
                &FnClassifier(scorer),
                &FnRegion(corner_only),
                CascadeMode::LabelFree
            ),
            Err(Error::InvalidDataset(_))
        ));
    }
}
