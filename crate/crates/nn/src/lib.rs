//! A deliberately small CPU tensor engine with reverse-mode automatic
//! differentiation, sized for 3D convolutional classifiers and U-Nets over
//! short slice stacks.
//!
//! Tensors are dense, row-major and laid out as `[batch, channels, depth,
//! height, width]` for volumetric activations. Every op is single-threaded
//! and iterates in a fixed order, so forward and backward passes are
//! bit-reproducible for a given input and parameter set.
//!
//! The engine is generic over [`Float`] so the same network definition can
//! be trained in `f32` and gradient-checked in `f64`.

mod error;
mod float;
pub mod init;
mod kernels;
pub mod layers;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{NnError, Result};
pub use float::Float;
pub use params::{ParamId, ParamStore, RunningStats};
pub use tape::{BatchStats, Mode, Tape, Var};
pub use tensor::Tensor;
