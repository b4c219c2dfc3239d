//! Quality control for short-axis cine cardiac MR: detect stacks that are
//! missing their basal or apical slice with a 3D convolutional classifier,
//! explain its positive decisions with superpixel perturbations, learn the
//! resulting salient regions with an attention U-Net, and re-predict
//! negatives on their salient region to recover false negatives.
//!
//! Module map:
//! - [`dataprep`]: volumes, triplet extraction, phantoms, augmentation, folds
//! - [`baseline`]: the 3D CNN classifier and its checkpoints
//! - [`explainer`]: SLIC superpixels and the weighted linear surrogate
//! - [`segmenter`]: attention U-Net, Dice/Jaccard, salient-region masking
//! - [`cascade`]: salient-region detection and baseline improvement pipelines
//! - [`harness`]: metrics, cross-validation and reports
//! - [`pipeline`]: run-directory stages used by the command-line tool

pub mod baseline;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod dataprep;
mod error;
pub mod explainer;
pub mod harness;
pub mod manifest;
pub mod pipeline;
pub mod segmenter;
mod stack;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use stack::{Mask, Stack, STACK_DEPTH};
