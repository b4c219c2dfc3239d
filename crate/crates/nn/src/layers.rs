//! Parameter-owning building blocks that record onto a [`Tape`].

use crate::error::Result;
use crate::float::Float;
use crate::init::Initializer;
use crate::params::{ParamId, ParamStore, RunningStats};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = store.add(
            format!("{name}.weight"),
            init.he_uniform(&[cout, cin, kernel[0], kernel[1], kernel[2]], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        tape.conv3d(x, self.weight, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

impl BatchNorm {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        running: &mut RunningStats<T>,
        name: &str,
        channels: usize,
    ) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let slot = running.add(channels);
        Self { gamma, beta, slot }
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<'_, T>,
        running: &RunningStats<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        tape.batch_norm(x, self.gamma, self.beta, running, self.slot, mode)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.he_uniform(&[fan_out, fan_in], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}
