use coverage_nn::init::Initializer;
use coverage_nn::layers::{BatchNorm, Conv3d, Linear};
use coverage_nn::{Mode, ParamStore, RunningStats, Tape, Tensor};

/// A toy graph that touches every op the engine exposes.
struct Toy {
    params: ParamStore<f64>,
    running: RunningStats<f64>,
    c1: Conv3d,
    bn: BatchNorm,
    gate: Conv3d,
    c2: Conv3d,
    fc: Linear,
    bn_fc: BatchNorm,
}

impl Toy {
    fn new(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut running = RunningStats::new();
        let mut init = Initializer::new(seed);
        let c1 = Conv3d::new(&mut params, &mut init, "c1", 2, 3, [3, 3, 3]);
        let bn = BatchNorm::new(&mut params, &mut running, "bn", 3);
        let gate = Conv3d::new(&mut params, &mut init, "gate", 3, 1, [1, 1, 1]);
        let c2 = Conv3d::new(&mut params, &mut init, "c2", 6, 2, [3, 3, 3]);
        let fc = Linear::new(&mut params, &mut init, "fc", 2 * 4 * 4, 3);
        let bn_fc = BatchNorm::new(&mut params, &mut running, "bn_fc", 3);
        // perturb BN affine parameters away from identity
        for (i, v) in params.get_mut(bn.gamma).data_mut().iter_mut().enumerate() {
            *v = 0.7 + 0.2 * i as f64;
        }
        for (i, v) in params.get_mut(bn.beta).data_mut().iter_mut().enumerate() {
            *v = 0.1 - 0.15 * i as f64;
        }
        Self {
            params,
            running,
            c1,
            bn,
            gate,
            c2,
            fc,
            bn_fc,
        }
    }

    fn loss(
        &self,
        x: &Tensor<f64>,
        seg_t: &Tensor<f64>,
        cls_t: &Tensor<f64>,
    ) -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new(&self.params);
        let xin = tape.leaf(x.clone());
        let h = self.c1.forward(&mut tape, xin).unwrap();
        let h = self
            .bn
            .forward(&mut tape, &self.running, h, Mode::Train)
            .unwrap();
        let h = tape.relu(h);
        let p = tape.max_pool(h, [1, 2, 2]).unwrap();
        let u = tape.upsample(p, [1, 2, 2]).unwrap();
        let a = self.gate.forward(&mut tape, u).unwrap();
        let a = tape.sigmoid(a);
        let g = tape.gate(h, a).unwrap();
        let cat = tape.concat(g, u).unwrap();
        let out = self.c2.forward(&mut tape, cat).unwrap();
        let sum = tape.add(out, out).unwrap();
        // segmentation-like head on channel 0 via dice + bce over the full map
        let dice = tape.soft_dice_loss(sum, seg_t).unwrap();
        let bce = tape.bce_with_logits(sum, seg_t).unwrap();
        let pooled = tape.max_pool(sum, [3, 2, 2]).unwrap();
        let flat = tape.flatten(pooled);
        let logits = self.fc.forward(&mut tape, flat).unwrap();
        let logits = self
            .bn_fc
            .forward(&mut tape, &self.running, logits, Mode::Train)
            .unwrap();
        let cls = tape.bce_with_logits(logits, cls_t).unwrap();
        let l = tape.add(dice, bce).unwrap();
        let l = tape.add(l, cls).unwrap();
        let val = tape.value(l).data()[0];
        (val, tape.backward(l))
    }
}

#[test]
fn every_op_matches_central_differences() {
    let mut toy = Toy::new(11);
    let mut init = Initializer::new(5);
    let x: Tensor<f64> = init.uniform(&[2, 2, 3, 8, 8], 1.0);
    let seg_t = Tensor::from_vec(
        &[2, 2, 3, 8, 8],
        (0..768)
            .map(|i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();
    let cls_t = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let (_, grads) = toy.loss(&x, &seg_t, &cls_t);

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for p in 0..toy.params.len() {
        let n = toy.params.tensors()[p].len();
        for j in (0..n).step_by((n / 12).max(1)) {
            let orig = toy.params.tensors()[p].data()[j];
            toy.params.tensors_mut()[p].data_mut()[j] = orig + eps;
            let (lp, _) = toy.loss(&x, &seg_t, &cls_t);
            toy.params.tensors_mut()[p].data_mut()[j] = orig - eps;
            let (lm, _) = toy.loss(&x, &seg_t, &cls_t);
            toy.params.tensors_mut()[p].data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads[p].data()[j];
            let diff = (numeric - analytic).abs();
            let scale = numeric.abs().max(analytic.abs());
            // biases feeding straight into batch norm have exactly zero gradient
            if scale > 1e-6 {
                worst = worst.max(diff / scale);
            }
            checked += 1;
            assert!(
                diff <= 1e-4 * scale + 1e-7,
                "{}[{j}]: analytic {analytic} numeric {numeric}",
                toy.params.names()[p]
            );
        }
    }
    assert!(checked > 50, "only {checked} entries checked");
    eprintln!("checked {checked} entries, worst relative error {worst:.2e}");
}
