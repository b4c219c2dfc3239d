//! 3D attention U-Net mapping a stack to its salient-region mask, plus the
//! overlap measures used to score it.
//!
//! Each encoder level is two conv → BN → ReLU layers; levels are joined by
//! in-plane max-pooling. Each decoder level upsamples in-plane, applies a
//! conv → BN → ReLU, gates the matching skip connection with an additive
//! attention gate, concatenates the two and applies another double conv.
//! A final 1x1x1 convolution gives one logit per voxel.

use std::collections::BTreeMap;

use coverage_nn::init::Initializer;
use coverage_nn::layers::{BatchNorm, Conv3d};
use coverage_nn::{Float, Mode, ParamStore, RunningStats, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    arch_fingerprint, pack_weights, require_fingerprint, unpack_weights, Checkpoint, CheckpointKind,
};
use crate::dataprep::Task;
use crate::error::{Error, Result};
use crate::explainer::MaskCorpus;
use crate::stack::{Mask, Stack};
use crate::training::{EpochLog, LossMeter, OptimizerKind, TrainConfig, TrainLog};

const EVAL_CHUNK: usize = 16;

/// Dice coefficient of `a` against reference `b`: `2TP / (FN + 2TP + FP)`; 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    let (tp, fp, fneg) = overlap(a, b)?;
    Ok(if tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (fneg + 2 * tp + fp) as f64
    })
}

/// Jaccard index `TP / (TP + FN + FP)`; 1 when both are empty.
pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    let (tp, fp, fneg) = overlap(a, b)?;
    Ok(if tp + fp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (tp + fneg + fp) as f64
    })
}

fn overlap(a: &Mask, b: &Mask) -> Result<(usize, usize, usize)> {
    if a.size() != b.size() {
        return Err(Error::ShapeMismatch {
            expected: format!("3x{0}x{0}", b.size()),
            got: format!("3x{0}x{0}", a.size()),
        });
    }
    let tp = a.intersection(b);
    Ok((tp, a.count() - tp, b.count() - tp))
}

/// Zero every voxel outside `mask`.
pub fn apply_salient_region(stack: &Stack, mask: &Mask) -> Result<Stack> {
    if stack.size() != mask.size() {
        return Err(Error::ShapeMismatch {
            expected: format!("3x{0}x{0}", stack.size()),
            got: format!("3x{0}x{0}", mask.size()),
        });
    }
    let data = stack
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Stack::new(stack.size(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub input_size: usize,
    /// Channels per encoder level, shallow to deep.
    pub levels: Vec<usize>,
    pub kernel: [usize; 3],
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            input_size: 128,
            levels: vec![16, 32, 64, 128],
            kernel: [3, 3, 3],
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 || self.levels.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 nonzero levels, got {:?}",
                self.levels
            )));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidSpec(format!(
                "kernel {:?} must be odd",
                self.kernel
            )));
        }
        let shrink = 1 << (self.levels.len() - 1);
        if self.input_size == 0 || self.input_size % shrink != 0 {
            return Err(Error::InvalidSpec(format!(
                "input size {} not divisible by {shrink}",
                self.input_size
            )));
        }
        Ok(())
    }
}

const POOL: [usize; 3] = [1, 2, 2];

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv3d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn new<T: Float>(
        p: &mut ParamStore<T>,
        r: &mut RunningStats<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        k: [usize; 3],
    ) -> Self {
        Self {
            conv: Conv3d::new(p, init, &format!("{name}.conv"), cin, cout, k),
            bn: BatchNorm::new(p, r, &format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Float>(
        &self,
        t: &mut Tape<'_, T>,
        r: &RunningStats<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.conv.forward(t, x)?;
        let h = self.bn.forward(t, r, h, mode)?;
        Ok(t.relu(h))
    }
}

#[derive(Clone, Debug)]
struct AttentionGate {
    wg: Conv3d,
    wg_bn: BatchNorm,
    wx: Conv3d,
    wx_bn: BatchNorm,
    psi: Conv3d,
    psi_bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: ConvBnRelu,
    gate: AttentionGate,
    block: [ConvBnRelu; 2],
}

#[derive(Clone, Debug)]
pub struct AttentionUNet<T> {
    pub spec: UNetSpec,
    pub params: ParamStore<T>,
    pub running: RunningStats<T>,
    encoder: Vec<[ConvBnRelu; 2]>,
    decoder: Vec<DecoderLevel>,
    head: Conv3d,
}

impl<T: Float> AttentionUNet<T> {
    pub fn build(spec: &UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamStore::new();
        let mut r = RunningStats::new();
        let mut init = Initializer::new(seed);
        let k = spec.kernel;
        let one = [1, 1, 1];
        let mut encoder = Vec::new();
        let mut cin = 1;
        for (l, &c) in spec.levels.iter().enumerate() {
            encoder.push([
                ConvBnRelu::new(&mut p, &mut r, &mut init, &format!("enc{l}a"), cin, c, k),
                ConvBnRelu::new(&mut p, &mut r, &mut init, &format!("enc{l}b"), c, c, k),
            ]);
            cin = c;
        }
        let mut decoder = Vec::new();
        for l in (0..spec.levels.len() - 1).rev() {
            let (c, deeper) = (spec.levels[l], spec.levels[l + 1]);
            let inter = (c / 2).max(1);
            let name = format!("dec{l}");
            decoder.push(DecoderLevel {
                up: ConvBnRelu::new(
                    &mut p,
                    &mut r,
                    &mut init,
                    &format!("{name}.up"),
                    deeper,
                    c,
                    k,
                ),
                gate: AttentionGate {
                    wg: Conv3d::new(&mut p, &mut init, &format!("{name}.att.wg"), c, inter, one),
                    wg_bn: BatchNorm::new(&mut p, &mut r, &format!("{name}.att.wg_bn"), inter),
                    wx: Conv3d::new(&mut p, &mut init, &format!("{name}.att.wx"), c, inter, one),
                    wx_bn: BatchNorm::new(&mut p, &mut r, &format!("{name}.att.wx_bn"), inter),
                    psi: Conv3d::new(&mut p, &mut init, &format!("{name}.att.psi"), inter, 1, one),
                    psi_bn: BatchNorm::new(&mut p, &mut r, &format!("{name}.att.psi_bn"), 1),
                },
                block: [
                    ConvBnRelu::new(&mut p, &mut r, &mut init, &format!("{name}a"), 2 * c, c, k),
                    ConvBnRelu::new(&mut p, &mut r, &mut init, &format!("{name}b"), c, c, k),
                ],
            });
        }
        let head = Conv3d::new(&mut p, &mut init, "head", spec.levels[0], 1, one);
        Ok(Self {
            spec: spec.clone(),
            params: p,
            running: r,
            encoder,
            decoder,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn fingerprint(&self) -> String {
        arch_fingerprint(&self.spec, &self.params.layout())
    }

    /// Voxel logits `[n, 1, 3, s, s]` for input of the same shape.
    pub fn forward(&self, t: &mut Tape<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let r = &self.running;
        let mut skips = Vec::new();
        let mut h = x;
        for (l, [a, b]) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = t.max_pool(h, POOL)?;
            }
            h = a.forward(t, r, h, mode)?;
            h = b.forward(t, r, h, mode)?;
            skips.push(h);
        }
        skips.pop();
        for dec in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = t.upsample(h, POOL)?;
            let up = dec.up.forward(t, r, up, mode)?;
            let g = &dec.gate;
            let a = g.wg.forward(t, up)?;
            let a = g.wg_bn.forward(t, r, a, mode)?;
            let b = g.wx.forward(t, skip)?;
            let b = g.wx_bn.forward(t, r, b, mode)?;
            let s = t.add(a, b)?;
            let s = t.relu(s);
            let s = g.psi.forward(t, s)?;
            let s = g.psi_bn.forward(t, r, s, mode)?;
            let alpha = t.sigmoid(s);
            let attended = t.gate(skip, alpha)?;
            h = t.concat(attended, up)?;
            h = dec.block[0].forward(t, r, h, mode)?;
            h = dec.block[1].forward(t, r, h, mode)?;
        }
        Ok(self.head.forward(t, h)?)
    }

    /// Per-voxel foreground probabilities, inference mode.
    pub fn predict_tensor(&self, x: Tensor<T>) -> Result<Vec<f64>> {
        let mut t = Tape::new(&self.params);
        let xin = t.leaf(x);
        let z = self.forward(&mut t, xin, Mode::Eval)?;
        let p = t.sigmoid(z);
        Ok(t.value(p).data().iter().map(|v| v.as_f64()).collect())
    }
}

impl AttentionUNet<f32> {
    /// Threshold the voxel probabilities at 0.5.
    pub fn predict_masks(&self, stacks: &[&Stack]) -> Result<Vec<Mask>> {
        let size = self.spec.input_size;
        let mut out = Vec::with_capacity(stacks.len());
        for chunk in stacks.chunks(EVAL_CHUNK) {
            for s in chunk {
                s.check_size(size)?;
            }
            let probs = self.predict_tensor(Stack::batch_tensor(chunk)?)?;
            let per = probs.len() / chunk.len();
            for p in probs.chunks(per) {
                out.push(Mask::new(size, p.iter().map(|&v| v >= 0.5).collect())?);
            }
        }
        Ok(out)
    }

    pub fn predict_mask(&self, stack: &Stack) -> Result<Mask> {
        Ok(self.predict_masks(&[stack])?.remove(0))
    }

    pub fn to_checkpoint(
        &self,
        task: Task,
        cfg: &TrainConfig,
        metrics: BTreeMap<String, f64>,
    ) -> Checkpoint {
        Checkpoint::new(
            CheckpointKind::segmenter(task),
            &self.spec,
            &self.params.layout(),
            cfg.clone(),
            metrics,
            pack_weights(&self.params, &self.running),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, task: Task) -> Result<Self> {
        ckpt.expect_kind(CheckpointKind::segmenter(task))?;
        let spec: UNetSpec = ckpt.arch()?;
        let mut net = Self::build(&spec, 0)?;
        let fp = net.fingerprint();
        unpack_weights(ckpt, fp, &mut net.params, &mut net.running)?;
        Ok(net)
    }

    pub fn from_checkpoint_expecting(
        ckpt: &Checkpoint,
        task: Task,
        expected: &UNetSpec,
    ) -> Result<Self> {
        require_fingerprint(ckpt, Self::build(expected, 0)?.fingerprint())?;
        Self::from_checkpoint(ckpt, task)
    }
}

/// Default optimisation for the segmenter: Adam at 1e-3, 50 epochs.
pub fn default_unet_train_config() -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    /// Mean of per-stack Dice.
    pub dice: f64,
    /// Dice over all voxels pooled.
    pub dice_global: f64,
    pub jaccard: f64,
    pub jaccard_global: f64,
}

/// Per-stack-mean and pooled overlap between `predicted` and `reference`.
pub fn score_masks(predicted: &[Mask], reference: &[Mask]) -> Result<SegmentationScores> {
    if predicted.len() != reference.len() {
        return Err(Error::LengthMismatch(reference.len(), predicted.len()));
    }
    let n = predicted.len().max(1) as f64;
    let (mut d, mut j) = (0.0, 0.0);
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (a, b) in predicted.iter().zip(reference) {
        d += dice(a, b)?;
        j += jaccard(a, b)?;
        let (t, f, g) = overlap(a, b)?;
        tp += t;
        fp += f;
        fneg += g;
    }
    let pooled = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(SegmentationScores {
        dice: d / n,
        dice_global: pooled(2 * tp, 2 * tp + fp + fneg),
        jaccard: j / n,
        jaccard_global: pooled(tp, tp + fp + fneg),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterReport {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// Scores on the held-out pairs, or on the training pairs when none were held out.
    pub val: SegmentationScores,
    pub train: SegmentationScores,
    pub log: TrainLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterTrainOptions {
    /// Share of corpus pairs held out for validation.
    pub val_fraction: f64,
    /// Apply a random in-plane flip/transpose to each training pair every epoch.
    pub dihedral_augment: bool,
}

impl Default for SegmenterTrainOptions {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            dihedral_augment: true,
        }
    }
}

/// One of the 8 symmetries of the square applied to every slice; `t` in `0..8`.
fn dihedral<V: Copy>(src: &[V], size: usize, t: u8) -> Vec<V> {
    let plane = size * size;
    let mut out = Vec::with_capacity(src.len());
    for s in 0..src.len() / plane {
        for y in 0..size {
            for x in 0..size {
                let (mut sy, mut sx) = if t & 4 != 0 { (x, y) } else { (y, x) };
                if t & 1 != 0 {
                    sx = size - 1 - sx;
                }
                if t & 2 != 0 {
                    sy = size - 1 - sy;
                }
                out.push(src[s * plane + sy * size + sx]);
            }
        }
    }
    out
}

/// Train on a mask corpus with BCE + soft Dice, holding out part of the pairs.
pub fn train_unet(
    corpus: &MaskCorpus,
    spec: &UNetSpec,
    cfg: &TrainConfig,
    opts: &SegmenterTrainOptions,
) -> Result<(AttentionUNet<f32>, SegmenterReport)> {
    let val_fraction = opts.val_fraction;
    cfg.validate()?;
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut net = AttentionUNet::<f32>::build(spec, cfg.seed)?;
    for p in &corpus.pairs {
        p.stack.check_size(spec.input_size)?;
        if p.mask.size() != spec.input_size {
            return Err(Error::ShapeMismatch {
                expected: format!("3x{0}x{0} mask", spec.input_size),
                got: format!("3x{0}x{0}", p.mask.size()),
            });
        }
    }
    let n = corpus.pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0a11_da7a));
    let n_val = if n >= 2 {
        ((n as f64 * val_fraction.clamp(0.0, 0.9)).round() as usize)
            .clamp(usize::from(val_fraction > 0.0), n - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();

    let mut opt = cfg.optimizer();
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ed_7a1e);
    let size = spec.input_size;
    let mut log = TrainLog::default();
    let mut last_finite = None;
    let val_stacks: Vec<&Stack> = val_idx.iter().map(|&i| &corpus.pairs[i].stack).collect();
    let val_masks: Vec<Mask> = val_idx
        .iter()
        .map(|&i| corpus.pairs[i].mask.clone())
        .collect();
    for (epoch, batches) in cfg.batches(train_idx.len()) {
        let mut meter = LossMeter::new(last_finite);
        for (b, idx) in batches.iter().enumerate() {
            let pairs: Vec<_> = idx.iter().map(|&i| &corpus.pairs[train_idx[i]]).collect();
            let mut x_data = Vec::with_capacity(pairs.len() * 3 * size * size);
            let mut target_data = Vec::with_capacity(x_data.capacity());
            for p in &pairs {
                let t = if opts.dihedral_augment {
                    aug_rng.random_range(0..8u8)
                } else {
                    0
                };
                x_data.extend(dihedral(p.stack.data(), size, t));
                target_data.extend(dihedral(&p.mask.to_f32(), size, t));
            }
            let x = Tensor::from_vec(&[pairs.len(), 1, 3, size, size], x_data)?;
            let target = Tensor::from_vec(x.shape(), target_data)?;
            let (loss, grads, stats) = {
                let mut tape = Tape::new(&net.params);
                let xin = tape.leaf(x);
                let z = net.forward(&mut tape, xin, Mode::Train)?;
                let bce = tape.bce_with_logits(z, &target)?;
                let dl = tape.soft_dice_loss(z, &target)?;
                let l = tape.add(bce, dl)?;
                let loss = tape.value(l).data()[0] as f64;
                (loss, tape.backward(l), tape.take_stats())
            };
            meter.push(loss, pairs.len(), epoch, b)?;
            opt.step(&mut net.params, &grads);
            for s in &stats {
                net.running.absorb(s, cfg.bn_momentum as f32);
            }
        }
        last_finite = Some(meter.mean());
        let val_score = if val_stacks.is_empty() {
            None
        } else {
            Some(score_masks(&net.predict_masks(&val_stacks)?, &val_masks)?.dice)
        };
        log::debug!(
            "unet epoch {epoch}: loss {:.4} val dice {val_score:?}",
            meter.mean()
        );
        log.epochs.push(EpochLog {
            epoch,
            train_loss: meter.mean(),
            val_loss: None,
            val_score,
        });
    }
    let train_stacks: Vec<&Stack> = train_idx.iter().map(|&i| &corpus.pairs[i].stack).collect();
    let train_masks: Vec<Mask> = train_idx
        .iter()
        .map(|&i| corpus.pairs[i].mask.clone())
        .collect();
    let train = score_masks(&net.predict_masks(&train_stacks)?, &train_masks)?;
    let val = if val_stacks.is_empty() {
        train.clone()
    } else {
        score_masks(&net.predict_masks(&val_stacks)?, &val_masks)?
    };
    let ids = |idx: &[usize]| {
        idx.iter()
            .map(|&i| corpus.pairs[i].sample_id.clone())
            .collect()
    };
    let report = SegmenterReport {
        train_ids: ids(&train_idx),
        val_ids: ids(&val_idx),
        val,
        train,
        log,
    };
    Ok((net, report))
}
