//! Perturbation-based explanations of positive classifier decisions.
//!
//! A stack's mean projection is cut into superpixels, random subsets of them
//! are blanked out, the classifier scores every variant, and a weighted
//! linear model over the on/off indicators ranks superpixels. The highest
//! ranked superpixel, replicated over the three slices, is the explanation mask.

mod corpus;
mod slic;
mod surrogate;

use serde::{Deserialize, Serialize};

use crate::baseline::StackClassifier;
use crate::dataprep::{Label, TripletSample};
use crate::error::{Error, Result};
use crate::stack::{Mask, Stack};

pub use corpus::{load_corpus, save_corpus, CorpusPair, MaskCorpus};
pub use slic::{slic, SlicParams, SuperpixelMap};
pub use surrogate::{fit_surrogate, perturb, perturbation_weight, PerturbationBatch, Surrogate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub num_perturbations: usize,
    pub kernel_width: f64,
    pub fill_value: f32,
    pub ridge_penalty: f64,
    pub on_probability: f64,
    pub slic: SlicParams,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            num_perturbations: 150,
            kernel_width: 0.25,
            fill_value: 0.0,
            ridge_penalty: 1e-6,
            on_probability: 0.5,
            slic: SlicParams::default(),
            seed: 0,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_width > 0.0) || self.num_perturbations < 2 || !(self.ridge_penalty >= 0.0)
        {
            return Err(Error::InvalidSpec(format!(
                "explainer settings out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationResult {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub top_superpixel_id: usize,
    pub mask: Mask,
    pub surrogate_r2: f64,
    pub rank_deficient: bool,
    pub superpixels: SuperpixelMap,
    /// Classifier output on the unperturbed stack.
    pub probability: f64,
}

/// Explain one stack. Deterministic for a given stack, model and `cfg.seed`.
pub fn explain(
    stack: &Stack,
    model: &dyn StackClassifier,
    cfg: &ExplainerConfig,
) -> Result<ExplanationResult> {
    cfg.validate()?;
    let size = stack.size();
    let superpixels = slic(&stack.mean_projection(), size, &cfg.slic);
    let k = superpixels.num_segments;
    if cfg.num_perturbations < k {
        log::warn!(
            "{} perturbations for {k} superpixels; the surrogate is underdetermined",
            cfg.num_perturbations
        );
    }
    let batch = PerturbationBatch::sample(cfg.num_perturbations, k, cfg.on_probability, cfg.seed);
    let variants = perturb(stack, &superpixels, &batch, cfg.fill_value)?;
    let refs: Vec<&Stack> = variants.iter().collect();
    let predictions = model.predict_batch(&refs)?;
    let weights: Vec<f64> = batch
        .rows
        .iter()
        .map(|r| perturbation_weight(r, cfg.kernel_width))
        .collect();
    let fit = fit_surrogate(&batch, &predictions, &weights, cfg.ridge_penalty)?;
    let top = fit.top();
    let plane: Vec<bool> = superpixels.labels.iter().map(|&l| l == top).collect();
    Ok(ExplanationResult {
        top_superpixel_id: top,
        mask: Mask::from_plane(size, &plane)?,
        coefficients: fit.coefficients,
        intercept: fit.intercept,
        surrogate_r2: fit.r2,
        rank_deficient: fit.rank_deficient,
        superpixels,
        probability: predictions[0],
    })
}

/// Explain every true positive (labelled `P`, scored at least 0.5) in `samples`.
pub fn build_mask_corpus(
    samples: &[&TripletSample],
    model: &dyn StackClassifier,
    cfg: &ExplainerConfig,
) -> Result<MaskCorpus> {
    let positives: Vec<&TripletSample> = samples
        .iter()
        .copied()
        .filter(|s| s.label == Label::P)
        .collect();
    let stacks: Vec<&Stack> = positives.iter().map(|s| &s.stack).collect();
    let probs = model.predict_batch(&stacks)?;
    let mut pairs = Vec::new();
    for (s, p) in positives.iter().zip(probs) {
        if Label::from_probability(p) != Label::P {
            continue;
        }
        let e = explain(&s.stack, model, cfg)?;
        pairs.push(CorpusPair {
            sample_id: s.id.clone(),
            source_volume_id: s.source_volume_id.clone(),
            slice_indices: s.slice_indices,
            stack: s.stack.clone(),
            mask: e.mask,
            top_superpixel_id: e.top_superpixel_id,
            coefficients: e.coefficients,
            surrogate_r2: e.surrogate_r2,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let task = positives[0].task;
    Ok(MaskCorpus { task, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::FnClassifier;
    use crate::dataprep::Task;

    fn blob_stack(size: usize) -> Stack {
        let mut data = vec![0.1f32; 3 * size * size];
        for s in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    if (y as f64 - 10.0).powi(2) + (x as f64 - 20.0).powi(2) < 16.0 {
                        data[(s * size + y) * size + x] = 0.9;
                    }
                }
            }
        }
        Stack::new(size, data).unwrap()
    }

    /// Scores the mean intensity around (10, 20): only the blob matters.
    fn blob_model() -> FnClassifier<impl Fn(&Stack) -> f64> {
        FnClassifier(|s: &Stack| {
            let mut acc = 0.0;
            for y in 8..13 {
                for x in 18..23 {
                    acc += s.at(1, y, x) as f64;
                }
            }
            acc / 25.0
        })
    }

    #[test]
    fn explanation_lands_on_the_evidence() {
        let stack = blob_stack(32);
        let e = explain(&stack, &blob_model(), &ExplainerConfig::default()).unwrap();
        assert!(e.mask.bits()[32 + 10 * 32 + 20] || e.mask.bits()[10 * 32 + 20]);
        assert_eq!(
            e.mask.count(),
            3 * e.superpixels.segment_sizes()[e.top_superpixel_id]
        );
        assert!(e.surrogate_r2 > 0.5);
    }

    #[test]
    fn explanation_is_deterministic() {
        let stack = blob_stack(32);
        let cfg = ExplainerConfig::default();
        let a = explain(&stack, &blob_model(), &cfg).unwrap();
        let b = explain(&stack, &blob_model(), &cfg).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn constant_model_yields_lowest_id() {
        let e = explain(
            &blob_stack(32),
            &FnClassifier(|_: &Stack| 0.7),
            &ExplainerConfig::default(),
        )
        .unwrap();
        assert!(e.coefficients.iter().all(|c| c.abs() <= 1e-9));
        assert_eq!(e.top_superpixel_id, 0);
        assert_eq!(e.surrogate_r2, 0.0);
    }

    fn samples(n: usize) -> Vec<TripletSample> {
        (0..2 * n)
            .map(|i| TripletSample {
                id: format!("s{i}"),
                stack: {
                    let mut st = blob_stack(16);
                    st.data_mut()[0] = 0.001 + 0.01 * i as f32;
                    st
                },
                label: if i < n { Label::P } else { Label::N },
                task: Task::Basal,
                source_volume_id: format!("v{}", i % n),
                slice_indices: [6, 7, 8],
            })
            .collect()
    }

    #[test]
    fn corpus_keeps_true_positives_only() {
        let all = samples(10);
        let refs: Vec<&TripletSample> = all.iter().collect();
        let cfg = ExplainerConfig {
            num_perturbations: 40,
            ..Default::default()
        };
        let perfect = FnClassifier(|_: &Stack| 0.9);
        assert_eq!(
            build_mask_corpus(&refs, &perfect, &cfg)
                .unwrap()
                .pairs
                .len(),
            10
        );
        // the corner pixel encodes the sample index; s0..s2 are scored negative
        let picky = FnClassifier(|s: &Stack| {
            if (0.0005..0.025).contains(&s.at(0, 0, 0)) {
                0.2
            } else {
                0.9
            }
        });
        let corpus = build_mask_corpus(&refs, &picky, &cfg).unwrap();
        assert_eq!(corpus.pairs.len(), 7);
        assert!(corpus.pairs.iter().all(|p| all
            .iter()
            .any(|s| s.id == p.sample_id && s.label == Label::P)));
        let none = FnClassifier(|_: &Stack| 0.1);
        assert!(matches!(
            build_mask_corpus(&refs, &none, &cfg),
            Err(Error::EmptyCorpus)
        ));
    }
}
