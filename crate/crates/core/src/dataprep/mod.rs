//! Volumes, labelled triplets and fold assignment.
//!
//! Slice numbering is 1-based throughout: slice 1 is the apex end of a
//! full-coverage short-axis stack and slice `n` is the basal end.

mod augment;
mod folds;
mod io;
mod phantom;
mod resize;
mod triplets;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::Stack;

pub use augment::{
    apply_augmentation, augment, augment_training_set, AugmentParams, AugmentationSpec,
};
pub use folds::make_folds;
pub use io::{load_volume, load_volume_ordered, save_raw_volume, Normalization, SliceOrder};
pub use phantom::{
    generate_phantom, generate_phantoms, heart_mask, Disk, Phantom, PhantomSpec, PhantomTruth,
};
pub use resize::{center_crop_square, resize_bilinear};
pub use triplets::{extract_triplets, triplet_indices};

/// Which boundary slice a dataset is about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Apex,
    Basal,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Apex, Task::Basal];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Apex => "apex",
            Task::Basal => "basal",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "apex" | "apical" => Ok(Task::Apex),
            "basal" | "base" => Ok(Task::Basal),
            _ => Err(format!("unknown task `{s}` (expected apex or basal)")),
        }
    }
}

/// `P`: the boundary slice is present in the triplet. `N`: it is absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    P,
    N,
}

impl Label {
    pub fn from_probability(p: f64) -> Self {
        if p >= 0.5 {
            Label::P
        } else {
            Label::N
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::P
    }

    pub fn target(self) -> f32 {
        match self {
            Label::P => 1.0,
            Label::N => 0.0,
        }
    }
}

/// An ordered full-coverage cine volume (one cardiac phase).
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeStack {
    pub volume_id: String,
    height: usize,
    width: usize,
    slices: Vec<Vec<f32>>,
    pub pixel_spacing: (f64, f64),
    pub slice_thickness: f64,
}

impl VolumeStack {
    /// Validates slice count (8–10), uniform slice shape and finite intensities.
    pub fn new(
        volume_id: impl Into<String>,
        height: usize,
        width: usize,
        slices: Vec<Vec<f32>>,
        pixel_spacing: (f64, f64),
        slice_thickness: f64,
    ) -> Result<Self> {
        if !(8..=10).contains(&slices.len()) {
            return Err(Error::SliceCountOutOfRange(slices.len()));
        }
        for (i, s) in slices.iter().enumerate() {
            if s.len() != height * width {
                return Err(Error::NonUniformSliceShape {
                    index: i + 1,
                    expected: (height, width),
                    got: (s.len() / width.max(1), width),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "slice {} has non-finite intensities",
                    i + 1
                )));
            }
        }
        Ok(Self {
            volume_id: volume_id.into(),
            height,
            width,
            slices,
            pixel_spacing,
            slice_thickness,
        })
    }

    pub fn n(&self) -> usize {
        self.slices.len()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// 1-based slice access.
    pub fn slice(&self, index: usize) -> &[f32] {
        &self.slices[index - 1]
    }

    pub fn slices(&self) -> &[Vec<f32>] {
        &self.slices
    }

    /// Per-volume min-max rescale to `[0, 1]`; a constant volume becomes all zeros.
    pub fn normalize_minmax(&mut self) {
        let (lo, hi) = self
            .slices
            .iter()
            .flatten()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        for v in self.slices.iter_mut().flatten() {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
}

/// A labelled three-slice classifier input.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub id: String,
    pub stack: Stack,
    pub label: Label,
    pub task: Task,
    pub source_volume_id: String,
    /// 1-based, strictly consecutive indices into the source volume.
    pub slice_indices: [usize; 3],
}

/// All triplets of one task with a volume-grouped fold assignment.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub task: Task,
    pub samples: Vec<TripletSample>,
    /// `folds[i]` is the fold of `samples[i]`.
    pub folds: Vec<usize>,
    pub k: usize,
}

impl TaskDataset {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.samples
            .iter()
            .position(|s| s.id == sample_id)
            .map(|i| self.folds[i])
    }

    pub fn fold_samples(&self, fold: usize) -> Vec<&TripletSample> {
        self.samples
            .iter()
            .zip(&self.folds)
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s)
            .collect()
    }

    /// Samples of every fold except `held_out`.
    pub fn training_samples(&self, held_out: usize) -> Vec<&TripletSample> {
        self.samples
            .iter()
            .zip(&self.folds)
            .filter(|(_, &f)| f != held_out)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }
}
