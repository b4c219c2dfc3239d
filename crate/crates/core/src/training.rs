//! Optimisation settings and the per-epoch log shared by both networks.

use std::fmt::Write as _;
use std::path::Path;

use coverage_nn::optim::{Adam, Optimizer, Sgd};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Classical momentum for SGD; ignored by Adam.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Momentum of the running normalisation statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.001,
            momentum: 0.0,
            epochs: 50,
            batch_size: 8,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.epochs >= 1
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..=1.0).contains(&self.bn_momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!(
                "training settings out of range: {self:?}"
            )))
        }
    }

    pub fn optimizer(&self) -> Box<dyn Optimizer<f32>> {
        match self.optimizer {
            OptimizerKind::Sgd => {
                Box::new(Sgd::new(self.learning_rate as f32, self.momentum as f32))
            }
            OptimizerKind::Adam => Box::new(Adam::new(self.learning_rate as f32)),
        }
    }

    /// Mini-batches of sample indices for every epoch, reshuffled per epoch from `seed`.
    pub(crate) fn batches(&self, n: usize) -> impl Iterator<Item = (usize, Vec<Vec<usize>>)> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_ba7c);
        (1..=self.epochs).map(move |epoch| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            (
                epoch,
                order
                    .chunks(self.batch_size)
                    .map(<[usize]>::to_vec)
                    .collect(),
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Accuracy for the classifier, Dice for the segmenter.
    pub val_score: Option<f64>,
}

/// Loss trace of a finished run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// CSV with columns `epoch,train_loss,val_loss,<score_name>`.
    pub fn to_csv(&self, score_name: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = format!("epoch,train_loss,val_loss,{score_name}\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{},{}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_score)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path, score_name: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(score_name)).map_err(|e| Error::io(path, e))
    }
}

/// Running mean of a loss with the non-finite guard used by both trainers.
pub(crate) struct LossMeter {
    sum: f64,
    count: usize,
    last_finite: Option<f64>,
}

impl LossMeter {
    pub(crate) fn new(last_finite: Option<f64>) -> Self {
        Self {
            sum: 0.0,
            count: 0,
            last_finite,
        }
    }

    pub(crate) fn push(
        &mut self,
        loss: f64,
        weight: usize,
        epoch: usize,
        batch: usize,
    ) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch,
                last_finite: self.last_finite,
            });
        }
        self.last_finite = Some(loss);
        self.sum += loss * weight as f64;
        self.count += weight;
        Ok(())
    }

    pub(crate) fn mean(&self) -> f64 {
        self.sum / self.count.max(1) as f64
    }
}
