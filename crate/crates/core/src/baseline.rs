//! The 3D convolutional classifier: three conv → ReLU → max-pool → batch-norm
//! blocks, then three fully connected layers ending in one logit.

use std::collections::BTreeMap;

use coverage_nn::init::Initializer;
use coverage_nn::layers::{BatchNorm, Conv3d, Linear};
use coverage_nn::{Float, Mode, ParamStore, RunningStats, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    arch_fingerprint, pack_weights, require_fingerprint, unpack_weights, Checkpoint, CheckpointKind,
};
use crate::dataprep::{Label, Task, TripletSample};
use crate::error::{Error, Result};
use crate::stack::{Stack, STACK_DEPTH};
use crate::training::{EpochLog, LossMeter, TrainConfig, TrainLog};

/// Inference batch size; only affects speed, never results.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    /// In-plane side length of the square input.
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    /// `[depth, height, width]`
    pub kernel: [usize; 3],
    pub pool: [usize; 3],
    pub fc: Vec<usize>,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            input_size: 128,
            conv_channels: vec![16, 32, 64],
            kernel: [3, 3, 3],
            pool: [1, 2, 2],
            fc: vec![256, 64, 1],
        }
    }
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.conv_channels.len() != 3 || self.conv_channels.contains(&0) {
            return bad(format!(
                "need 3 nonzero conv blocks, got {:?}",
                self.conv_channels
            ));
        }
        if self.fc.len() != 3 || self.fc.contains(&0) || self.fc[2] != 1 {
            return bad(format!(
                "need 3 dense layers ending in 1 unit, got {:?}",
                self.fc
            ));
        }
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return bad(format!(
                "kernel {:?} must be odd for same padding",
                self.kernel
            ));
        }
        if self.pool.contains(&0) || self.pool[0] != 1 {
            return bad(format!("pool {:?} must keep the slice axis", self.pool));
        }
        let shrink = self.pool[1].pow(3).max(self.pool[2].pow(3));
        if self.input_size == 0 || self.input_size % shrink != 0 {
            return bad(format!(
                "input size {} not divisible by {shrink}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Width of the flattened feature vector entering the dense head.
    pub fn flat_features(&self) -> usize {
        let h = self.input_size / self.pool[1].pow(3);
        let w = self.input_size / self.pool[2].pow(3);
        self.conv_channels[2] * STACK_DEPTH * h * w
    }
}

/// Network weights plus the running statistics used at inference.
#[derive(Clone, Debug)]
pub struct BaselineNet<T> {
    pub spec: BaselineSpec,
    pub params: ParamStore<T>,
    pub running: RunningStats<T>,
    convs: Vec<Conv3d>,
    norms: Vec<BatchNorm>,
    dense: Vec<Linear>,
}

impl<T: Float> BaselineNet<T> {
    /// Deterministic initialisation for `seed`.
    pub fn build(spec: &BaselineSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut running = RunningStats::new();
        let mut init = Initializer::new(seed);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 1;
        for (i, &c) in spec.conv_channels.iter().enumerate() {
            convs.push(Conv3d::new(
                &mut params,
                &mut init,
                &format!("conv{i}"),
                cin,
                c,
                spec.kernel,
            ));
            norms.push(BatchNorm::new(
                &mut params,
                &mut running,
                &format!("bn{i}"),
                c,
            ));
            cin = c;
        }
        let mut dense = Vec::new();
        let mut fan_in = spec.flat_features();
        for (i, &f) in spec.fc.iter().enumerate() {
            dense.push(Linear::new(
                &mut params,
                &mut init,
                &format!("fc{i}"),
                fan_in,
                f,
            ));
            fan_in = f;
        }
        Ok(Self {
            spec: spec.clone(),
            params,
            running,
            convs,
            norms,
            dense,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn fingerprint(&self) -> String {
        arch_fingerprint(&self.spec, &self.params.layout())
    }

    /// Logits `[n, 1]` for input `[n, 1, 3, s, s]`.
    pub fn forward(&self, tape: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(tape, h)?;
            h = tape.relu(h);
            h = tape.max_pool(h, self.spec.pool)?;
            h = bn.forward(tape, &self.running, h, mode)?;
        }
        h = tape.flatten(h);
        let last = self.dense.len() - 1;
        for (i, fc) in self.dense.iter().enumerate() {
            h = fc.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Mean BCE loss on `x` against `targets` and the parameter gradients, in training mode.
    /// Running statistics are updated with `bn_momentum`.
    pub fn loss_and_grads(
        &mut self,
        x: Tensor<T>,
        targets: &Tensor<T>,
        bn_momentum: f64,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let (loss, grads, stats) = {
            let mut tape = Tape::new(&self.params);
            let xin = tape.leaf(x);
            let z = self.forward(&mut tape, xin, Mode::Train)?;
            let l = tape.bce_with_logits(z, targets)?;
            let loss = tape.value(l).data()[0].as_f64();
            (loss, tape.backward(l), tape.take_stats())
        };
        for s in &stats {
            self.running.absorb(s, T::of(bn_momentum));
        }
        Ok((loss, grads))
    }

    /// Positive-class probabilities for `[n, 1, 3, s, s]`, inference-mode normalisation.
    pub fn predict_tensor(&self, x: Tensor<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let xin = tape.leaf(x);
        let z = self.forward(&mut tape, xin, Mode::Eval)?;
        let p = tape.sigmoid(z);
        Ok(tape.value(p).data().iter().map(|v| v.as_f64()).collect())
    }
}

/// Anything that scores stacks with a positive-class probability.
pub trait StackClassifier {
    fn predict_batch(&self, stacks: &[&Stack]) -> Result<Vec<f64>>;

    fn predict(&self, stack: &Stack) -> Result<f64> {
        Ok(self.predict_batch(&[stack])?[0])
    }
}

/// Adapts a plain scoring function.
pub struct FnClassifier<F>(pub F);

impl<F: Fn(&Stack) -> f64> StackClassifier for FnClassifier<F> {
    fn predict_batch(&self, stacks: &[&Stack]) -> Result<Vec<f64>> {
        Ok(stacks.iter().map(|s| (self.0)(s)).collect())
    }
}

impl StackClassifier for BaselineNet<f32> {
    fn predict_batch(&self, stacks: &[&Stack]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(stacks.len());
        for chunk in stacks.chunks(EVAL_CHUNK) {
            for s in chunk {
                s.check_size(self.spec.input_size)?;
            }
            out.extend(self.predict_tensor(Stack::batch_tensor(chunk)?)?);
        }
        Ok(out)
    }
}

fn targets(samples: &[&TripletSample]) -> Tensor<f32> {
    Tensor::from_vec(
        &[samples.len(), 1],
        samples.iter().map(|s| s.label.target()).collect(),
    )
    .expect("one target per sample")
}

/// Mean BCE and accuracy of `model` on `samples`.
pub fn evaluate(model: &BaselineNet<f32>, samples: &[&TripletSample]) -> Result<(f64, f64)> {
    let stacks: Vec<&Stack> = samples.iter().map(|s| &s.stack).collect();
    let probs = model.predict_batch(&stacks)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (p, s) in probs.iter().zip(samples) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        loss -= if s.label.is_positive() {
            p.ln()
        } else {
            (1.0 - p).ln()
        };
        correct += usize::from(Label::from_probability(p) == s.label);
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mini-batch training with BCE. `val` may be empty; it is only logged.
pub fn train(
    model: &mut BaselineNet<f32>,
    task: Task,
    train: &[&TripletSample],
    val: &[&TripletSample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.task != task) {
        return Err(Error::InvalidDataset(format!(
            "{} is a {} sample, model is {task}",
            s.id, s.task
        )));
    }
    for s in train.iter().chain(val) {
        s.stack.check_size(model.spec.input_size)?;
    }
    let mut opt = cfg.optimizer();
    let mut log = TrainLog::default();
    let mut last_finite = None;
    for (epoch, batches) in cfg.batches(train.len()) {
        let mut meter = LossMeter::new(last_finite);
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&TripletSample> = idx.iter().map(|&i| train[i]).collect();
            let stacks: Vec<&Stack> = batch.iter().map(|s| &s.stack).collect();
            let (loss, grads) = model.loss_and_grads(
                Stack::batch_tensor(&stacks)?,
                &targets(&batch),
                cfg.bn_momentum,
            )?;
            meter.push(loss, batch.len(), epoch, b)?;
            opt.step(&mut model.params, &grads);
        }
        last_finite = Some(meter.mean());
        let (val_loss, val_score) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(model, val)?;
            (Some(l), Some(a))
        };
        log::debug!("{task} epoch {epoch}: train loss {:.4}", meter.mean());
        log.epochs.push(EpochLog {
            epoch,
            train_loss: meter.mean(),
            val_loss,
            val_score,
        });
    }
    Ok(log)
}

impl BaselineNet<f32> {
    pub fn to_checkpoint(
        &self,
        task: Task,
        cfg: &TrainConfig,
        metrics: BTreeMap<String, f64>,
    ) -> Checkpoint {
        Checkpoint::new(
            CheckpointKind::classifier(task),
            &self.spec,
            &self.params.layout(),
            cfg.clone(),
            metrics,
            pack_weights(&self.params, &self.running),
        )
    }

    /// Rebuild from an archive, checking kind and architecture fingerprint.
    pub fn from_checkpoint(ckpt: &Checkpoint, task: Task) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::classifier(task))?;
        let spec: BaselineSpec = ckpt.arch()?;
        let mut net = Self::build(&spec, 0)?;
        let fp = net.fingerprint();
        unpack_weights(ckpt, fp, &mut net.params, &mut net.running)?;
        Ok(net)
    }

    /// As [`Self::from_checkpoint`], additionally requiring `expected` architecture.
    pub fn from_checkpoint_expecting(
        ckpt: &Checkpoint,
        task: Task,
        expected: &BaselineSpec,
    ) -> Result<Self> {
        require_fingerprint(ckpt, Self::build(expected, 0)?.fingerprint())?;
        Self::from_checkpoint(ckpt, task)
    }
}
