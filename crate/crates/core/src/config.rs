//! Everything a run needs, serialized to `run.json` so a run can be replayed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineSpec;
use crate::cascade::CascadeMode;
use crate::dataprep::{AugmentationSpec, Normalization, PhantomSpec, SliceOrder, Task};
use crate::error::{Error, Result};
use crate::explainer::ExplainerConfig;
use crate::segmenter::{default_unet_train_config, SegmenterTrainOptions, UNetSpec};
use crate::training::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Ingest every volume file in this directory instead of generating phantoms.
    pub input_dir: Option<PathBuf>,
    pub slice_order: SliceOrder,
    pub normalization: Normalization,
    pub phantom_count: usize,
    pub phantom: PhantomSpec,
    /// In-plane size of every triplet slice.
    pub target_size: usize,
    pub folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input_dir: None,
            slice_order: SliceOrder::ApexFirst,
            normalization: Normalization::Minmax,
            phantom_count: 200,
            phantom: PhantomSpec::default(),
            target_size: 128,
            folds: 5,
        }
    }
}

/// Full run configuration. The per-stage `seed` fields are overwritten with
/// values derived from [`RunConfig::seed`] when a stage runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    /// `None` runs both tasks.
    pub task: Option<Task>,
    pub data: DataConfig,
    pub augmentation: AugmentationSpec,
    pub baseline: BaselineSpec,
    pub baseline_training: TrainConfig,
    pub explainer: ExplainerConfig,
    pub segmenter: UNetSpec,
    pub segmenter_training: TrainConfig,
    pub segmenter_options: SegmenterTrainOptions,
    pub cascade_mode: CascadeMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 7,
            task: None,
            data: DataConfig::default(),
            augmentation: AugmentationSpec::default(),
            baseline: BaselineSpec::default(),
            baseline_training: TrainConfig::default(),
            explainer: ExplainerConfig::default(),
            segmenter: UNetSpec::default(),
            segmenter_training: default_unet_train_config(),
            segmenter_options: SegmenterTrainOptions::default(),
            cascade_mode: CascadeMode::LabelFree,
        }
    }
}

impl RunConfig {
    /// A CPU-sized run on 64-pixel phantoms resampled to 32: narrower
    /// networks, fewer epochs, momentum SGD for the classifier and more
    /// perturbations per explanation.
    pub fn desk_scale() -> Self {
        let target = 32;
        Self {
            data: DataConfig {
                phantom: PhantomSpec {
                    size: 64,
                    ..PhantomSpec::default()
                },
                target_size: target,
                ..DataConfig::default()
            },
            baseline: BaselineSpec {
                input_size: target,
                conv_channels: vec![4, 8, 16],
                fc: vec![32, 16, 1],
                ..BaselineSpec::default()
            },
            baseline_training: TrainConfig {
                optimizer: OptimizerKind::Sgd,
                learning_rate: 0.003,
                momentum: 0.9,
                epochs: 10,
                ..TrainConfig::default()
            },
            explainer: ExplainerConfig {
                num_perturbations: 1000,
                ..ExplainerConfig::default()
            },
            segmenter: UNetSpec {
                input_size: target,
                levels: vec![4, 8, 16],
                ..UNetSpec::default()
            },
            segmenter_training: TrainConfig {
                learning_rate: 0.003,
                epochs: 20,
                ..default_unet_train_config()
            },
            ..Self::default()
        }
    }

    /// Tasks this run covers.
    pub fn tasks(&self) -> Vec<Task> {
        match self.task {
            Some(t) => vec![t],
            None => Task::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.baseline.validate()?;
        self.baseline_training.validate()?;
        self.explainer.validate()?;
        self.segmenter.validate()?;
        self.segmenter_training.validate()?;
        let size = self.data.target_size;
        if self.baseline.input_size != size || self.segmenter.input_size != size {
            return Err(Error::InvalidSpec(format!(
                "network input sizes ({}, {}) differ from the triplet size {size}",
                self.baseline.input_size, self.segmenter.input_size
            )));
        }
        if self.data.folds < 2 {
            return Err(Error::InvalidSpec(format!(
                "{} folds; need at least 2",
                self.data.folds
            )));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::InvalidSpec(format!(
                "run id `{}` is not a plain name",
                self.run_id
            )));
        }
        Ok(())
    }

    /// Seed for one stage of one task and fold; independent of everything else in the config.
    pub fn stage_seed(&self, stage: &str, task: Option<Task>, fold: Option<usize>) -> u64 {
        let mut h = fnv1a(self.seed.to_le_bytes().iter().copied(), FNV_OFFSET);
        h = fnv1a(stage.bytes(), h);
        if let Some(t) = task {
            h = fnv1a(t.as_str().bytes(), h);
        }
        if let Some(f) = fold {
            h = fnv1a((f as u64).to_le_bytes().iter().copied(), h);
        }
        h
    }

    /// First phantom volume seed; volumes use consecutive seeds from here.
    pub fn phantom_seed(&self) -> u64 {
        self.stage_seed("phantom", None, None) % 1_000_000_000
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv1a(bytes: impl Iterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
