use crate::error::{NnError, Result};
use crate::float::Float;
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore, RunningStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

/// Batch moments observed by a normalization layer during a training forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub slot: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    Concat {
        a: Var,
        b: Var,
    },
    Gate {
        x: Var,
        g: Var,
    },
    Add(Var, Var),
    Bce {
        z: Var,
        target: Vec<T>,
    },
    Dice {
        z: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Records a forward pass so that [`Tape::backward`] can return parameter gradients.
///
/// The tape borrows the parameter store; parameter values are never copied.
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    stats: Vec<BatchStats<T>>,
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

#[inline]
fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<'p, T: Float> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            stats: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("every non-param node stores its value"),
        }
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Normalization statistics collected so far (training mode only).
    pub fn take_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.stats)
    }

    /// Same-padded stride-1 3D convolution. Weight shape `[co, ci, kd, kh, kw]`, bias `[co]`.
    pub fn conv3d(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let [n, ci, d, h, wd] = self.value(x).dims5()?;
        let ws = self.params.get(w).shape().to_vec();
        if ws.len() != 5 || ws[1] != ci {
            return Err(mismatch("conv3d weight", &[0, ci, 0, 0, 0], &ws));
        }
        let geom = ConvGeom {
            n,
            ci,
            co: ws[0],
            d,
            h,
            w: wd,
            k: [ws[2], ws[3], ws[4]],
        };
        let out = kernels::conv3d_forward(
            geom,
            self.value(x).data(),
            self.params.get(w).data(),
            self.params.get(b).data(),
        );
        let (wv, bv) = (self.param(w), self.param(b));
        let t = Tensor::from_vec(&[n, geom.co, d, h, wd], out)?;
        Ok(self.push(
            t,
            Op::Conv {
                x,
                w: wv,
                b: bv,
                geom,
            },
        ))
    }

    /// Non-overlapping max pooling with window `[depth, height, width]`.
    pub fn max_pool(&mut self, x: Var, win: [usize; 3]) -> Result<Var> {
        let dims = self.value(x).dims5()?;
        let (out, argmax, od) = kernels::maxpool_forward(dims, win, self.value(x).data());
        let t = Tensor::from_vec(&od, out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// Per-channel batch normalization over `(n, d, h, w)`; rank-2 inputs are
    /// treated as `(n, c, 1, 1, 1)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running: &RunningStats<T>,
        slot: usize,
        mode: Mode,
    ) -> Result<Var> {
        let eps = T::of(1e-5);
        let params = self.params;
        let xdata = self.value(x).data().to_vec();
        let shape = self.value(x).shape().to_vec();
        let dims = match shape[..] {
            [n, c, d, h, w] => [n, c, d, h, w],
            [n, c] => [n, c, 1, 1, 1],
            _ => return Err(mismatch("batch_norm", &[0, 0, 0, 0, 0], &shape)),
        };
        let c = dims[1];
        if params.get(gamma).len() != c || running.mean(slot).len() != c {
            return Err(mismatch(
                "batch_norm channels",
                &[c],
                params.get(gamma).shape(),
            ));
        }
        let batch = mode == Mode::Train;
        let (mean, var) = if batch {
            let (m, v) = kernels::channel_moments(dims, &xdata);
            self.stats.push(BatchStats {
                slot,
                mean: m.clone(),
                var: v.clone(),
                count: dims[0] * dims[2] * dims[3] * dims[4],
            });
            (m, v)
        } else {
            (running.mean(slot).to_vec(), running.var(slot).to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xdata;
        kernels::for_each_plane(dims, &mut xhat, |ch, p| {
            for v in p {
                *v = (*v - mean[ch]) * inv_std[ch];
            }
        });
        let g = params.get(gamma).data();
        let bt = params.get(beta).data();
        let mut y = xhat.clone();
        kernels::for_each_plane(dims, &mut y, |ch, p| {
            for v in p {
                *v = g[ch] * *v + bt[ch];
            }
        });
        let (gv, bv) = (self.param(gamma), self.param(beta));
        let t = Tensor::from_vec(&shape, y)?;
        Ok(self.push(
            t,
            Op::Norm {
                x,
                gamma: gv,
                beta: bv,
                xhat,
                inv_std,
                batch,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    /// `x [n, f]`, weight `[o, f]`, bias `[o]` → `[n, o]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.params.get(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(mismatch(
                "linear",
                &[
                    xs.first().copied().unwrap_or(0),
                    ws.get(1).copied().unwrap_or(0),
                ],
                &xs,
            ));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let xd = self.value(x).data();
        let wd = self.params.get(w).data();
        let bd = self.params.get(b).data();
        let mut out = Vec::with_capacity(n * o);
        for r in 0..n {
            let row = &xd[r * f..(r + 1) * f];
            for k in 0..o {
                let wr = &wd[k * f..(k + 1) * f];
                let mut acc = bd[k];
                for (&a, &bb) in row.iter().zip(wr) {
                    acc += a * bb;
                }
                out.push(acc);
            }
        }
        let (wv, bv) = (self.param(w), self.param(b));
        let t = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(t, Op::Linear { x, w: wv, b: bv }))
    }

    /// Collapse all trailing axes: `[n, ...] → [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        let n = t.shape()[0];
        let rest = t.len() / n.max(1);
        let t = t.reshape(&[n, rest]).expect("same element count");
        self.push(t, Op::Reshape(x))
    }

    /// Nearest-neighbour upsampling by integer `[depth, height, width]` factors.
    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    let row = base + ((z / factor[0]) * h + y / factor[1]) * w;
                    for xx in 0..ow {
                        out.push(xd[row + xx / factor[2]]);
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, od, oh, ow], out)?;
        Ok(self.push(t, Op::Upsample { x, factor }))
    }

    /// Channel concatenation of two rank-5 tensors with equal `n, d, h, w`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, d, h, w] = self.value(a).dims5()?;
        let [nb, cb, db, hb, wb] = self.value(b).dims5()?;
        if (n, d, h, w) != (nb, db, hb, wb) {
            return Err(mismatch(
                "concat",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let plane = d * h * w;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&ad[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&bd[s * cb * plane..(s + 1) * cb * plane]);
        }
        let t = Tensor::from_vec(&[n, ca + cb, d, h, w], out)?;
        Ok(self.push(t, Op::Concat { a, b }))
    }

    /// `x [n, c, ...] * g [n, 1, ...]`, broadcasting the gate over channels.
    pub fn gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let gs = self.value(g).shape().to_vec();
        if gs != [n, 1, d, h, w] {
            return Err(mismatch("gate", &[n, 1, d, h, w], &gs));
        }
        let plane = d * h * w;
        let mut out = self.value(x).data().to_vec();
        let gd = self.value(g).data();
        for s in 0..n {
            let gp = &gd[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let o = (s * c + ch) * plane;
                for (v, &gv) in out[o..o + plane].iter_mut().zip(gp) {
                    *v *= gv;
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, d, h, w], out)?;
        Ok(self.push(t, Op::Gate { x, g }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(
                "add",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `target`, computed from logits.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor<T>) -> Result<Var> {
        let zt = self.value(z);
        if zt.len() != target.len() {
            return Err(mismatch("bce", zt.shape(), target.shape()));
        }
        let m = T::of(zt.len().max(1) as f64);
        let mut s = T::zero();
        for (&zi, &ti) in zt.data().iter().zip(target.data()) {
            s += zi.max(T::zero()) - zi * ti + (T::one() + (-zi.abs()).exp()).ln();
        }
        let t = Tensor::scalar(s / m);
        Ok(self.push(
            t,
            Op::Bce {
                z,
                target: target.data().to_vec(),
            },
        ))
    }

    /// `1 - soft Dice` between `sigmoid(z)` and `target`, averaged over the batch
    /// (smoothing constant 1).
    pub fn soft_dice_loss(&mut self, z: Var, target: &Tensor<T>) -> Result<Var> {
        let zt = self.value(z);
        if zt.len() != target.len() {
            return Err(mismatch("dice", zt.shape(), target.shape()));
        }
        let n = zt.shape()[0];
        let per = zt.len() / n.max(1);
        let mut total = T::zero();
        for s in 0..n {
            let (mut inter, mut ps, mut ts) = (T::zero(), T::zero(), T::zero());
            for i in s * per..(s + 1) * per {
                let p = sigmoid(zt.data()[i]);
                let t = target.data()[i];
                inter += p * t;
                ps += p;
                ts += t;
            }
            total += T::one() - (T::of(2.0) * inter + T::one()) / (ps + ts + T::one());
        }
        let t = Tensor::scalar(total / T::of(n.max(1) as f64));
        Ok(self.push(
            t,
            Op::Dice {
                z,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Gradients of scalar `loss` with respect to every parameter in the store,
    /// in store order. Unused parameters get zero gradients.
    pub fn backward(&self, loss: Var) -> Vec<Tensor<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Tensor<T>> = self
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        fn acc<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        let like = |v: Var, data: Vec<T>| -> Tensor<T> {
            Tensor::from_vec(self.value(v).shape(), data).expect("gradient matches value shape")
        };

        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => pgrads[id.index()].add_assign(&gy),
                Op::Conv { x, w, b, geom } => {
                    let (gx, gw, gb) = kernels::conv3d_backward(
                        *geom,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        gy.data(),
                    );
                    acc(&mut grads, *x, like(*x, gx));
                    acc(&mut grads, *w, like(*w, gw));
                    acc(&mut grads, *b, like(*b, gb));
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    for (&src, &g) in argmax.iter().zip(gy.data()) {
                        gx[src] += g;
                    }
                    acc(&mut grads, *x, like(*x, gx));
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let shape = self.value(*x).shape();
                    let dims = match shape[..] {
                        [n, c, d, h, w] => [n, c, d, h, w],
                        [n, c] => [n, c, 1, 1, 1],
                        _ => unreachable!(),
                    };
                    let c = dims[1];
                    let plane = dims[2] * dims[3] * dims[4];
                    let gam = self.value(*gamma).data();
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for s in 0..dims[0] {
                        for ch in 0..c {
                            let o = (s * c + ch) * plane;
                            for j in o..o + plane {
                                sum_g[ch] += gy.data()[j];
                                sum_gx[ch] += gy.data()[j] * xhat[j];
                            }
                        }
                    }
                    let m = T::of((dims[0] * plane) as f64);
                    let mut gx = gy.data().to_vec();
                    for s in 0..dims[0] {
                        for ch in 0..c {
                            let o = (s * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for j in o..o + plane {
                                gx[j] = if *batch {
                                    k * (gy.data()[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m)
                                } else {
                                    k * gy.data()[j]
                                };
                            }
                        }
                    }
                    acc(&mut grads, *x, like(*x, gx));
                    acc(&mut grads, *gamma, like(*gamma, sum_gx));
                    acc(&mut grads, *beta, like(*beta, sum_g));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx = gy
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    acc(&mut grads, *x, like(*x, gx));
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.as_ref().expect("stored").data();
                    let gx = gy
                        .data()
                        .iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect();
                    acc(&mut grads, *x, like(*x, gx));
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (n, f) = (xs[0], xs[1]);
                    let o = self.value(*w).shape()[0];
                    let (xd, wd, g) = (self.value(*x).data(), self.value(*w).data(), gy.data());
                    let mut gx = vec![T::zero(); n * f];
                    let mut gw = vec![T::zero(); o * f];
                    let mut gb = vec![T::zero(); o];
                    for r in 0..n {
                        let xr = &xd[r * f..(r + 1) * f];
                        for k in 0..o {
                            let gk = g[r * o + k];
                            gb[k] += gk;
                            let wr = &wd[k * f..(k + 1) * f];
                            for (a, &wv) in gx[r * f..(r + 1) * f].iter_mut().zip(wr) {
                                *a += gk * wv;
                            }
                            for (a, &xv) in gw[k * f..(k + 1) * f].iter_mut().zip(xr) {
                                *a += gk * xv;
                            }
                        }
                    }
                    acc(&mut grads, *x, like(*x, gx));
                    acc(&mut grads, *w, like(*w, gw));
                    acc(&mut grads, *b, like(*b, gb));
                }
                Op::Reshape(x) => {
                    let gx = gy.into_data();
                    acc(&mut grads, *x, like(*x, gx));
                }
                Op::Upsample { x, factor } => {
                    let [n, c, d, h, w] = self.value(*x).dims5().expect("rank 5");
                    let (od, oh, ow) = (d * factor[0], h * factor[1], w * factor[2]);
                    let mut gx = vec![T::zero(); n * c * d * h * w];
                    let g = gy.data();
                    let mut k = 0;
                    for nc in 0..n * c {
                        let base = nc * d * h * w;
                        for z in 0..od {
                            for y in 0..oh {
                                let row = base + ((z / factor[0]) * h + y / factor[1]) * w;
                                for xx in 0..ow {
                                    gx[row + xx / factor[2]] += g[k];
                                    k += 1;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, like(*x, gx));
                }
                Op::Concat { a, b } => {
                    let [n, ca, d, h, w] = self.value(*a).dims5().expect("rank 5");
                    let cb = self.value(*b).shape()[1];
                    let plane = d * h * w;
                    let g = gy.data();
                    let mut ga = Vec::with_capacity(n * ca * plane);
                    let mut gb = Vec::with_capacity(n * cb * plane);
                    for s in 0..n {
                        let o = s * (ca + cb) * plane;
                        ga.extend_from_slice(&g[o..o + ca * plane]);
                        gb.extend_from_slice(&g[o + ca * plane..o + (ca + cb) * plane]);
                    }
                    acc(&mut grads, *a, like(*a, ga));
                    acc(&mut grads, *b, like(*b, gb));
                }
                Op::Gate { x, g: gate } => {
                    let [n, c, d, h, w] = self.value(*x).dims5().expect("rank 5");
                    let plane = d * h * w;
                    let (xd, gd, g) = (self.value(*x).data(), self.value(*gate).data(), gy.data());
                    let mut gx = vec![T::zero(); xd.len()];
                    let mut gg = vec![T::zero(); gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let o = (s * c + ch) * plane;
                            for j in 0..plane {
                                gx[o + j] = g[o + j] * gd[s * plane + j];
                                gg[s * plane + j] += g[o + j] * xd[o + j];
                            }
                        }
                    }
                    acc(&mut grads, *x, like(*x, gx));
                    acc(&mut grads, *gate, like(*gate, gg));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, gy.clone());
                    acc(&mut grads, *a, gy);
                }
                Op::Bce { z, target } => {
                    let zv = self.value(*z).data();
                    let scale = gy.data()[0] / T::of(zv.len().max(1) as f64);
                    let gz = zv
                        .iter()
                        .zip(target)
                        .map(|(&zi, &ti)| (sigmoid(zi) - ti) * scale)
                        .collect();
                    acc(&mut grads, *z, like(*z, gz));
                }
                Op::Dice { z, target } => {
                    let zt = self.value(*z);
                    let n = zt.shape()[0];
                    let per = zt.len() / n.max(1);
                    let scale = gy.data()[0] / T::of(n.max(1) as f64);
                    let mut gz = vec![T::zero(); zt.len()];
                    for s in 0..n {
                        let r = s * per..(s + 1) * per;
                        let p: Vec<T> = zt.data()[r.clone()].iter().map(|&v| sigmoid(v)).collect();
                        let t = &target[r.clone()];
                        let inter: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
                        let den: T =
                            p.iter().copied().sum::<T>() + t.iter().copied().sum::<T>() + T::one();
                        let num = T::of(2.0) * inter + T::one();
                        for (j, (&pi, &ti)) in p.iter().zip(t).enumerate() {
                            // d(1 - num/den)/dp
                            let dp = -(T::of(2.0) * ti * den - num) / (den * den);
                            gz[s * per + j] = scale * dp * pi * (T::one() - pi);
                        }
                    }
                    acc(&mut grads, *z, like(*z, gz));
                }
            }
        }
        pgrads
    }
}

impl<T: Float> RunningStats<T> {
    /// Exponential moving update from a training batch; variance is stored unbiased.
    pub fn absorb(&mut self, s: &BatchStats<T>, momentum: T) {
        let m = s.count as f64;
        let unbias = T::of(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
        let keep = T::one() - momentum;
        for ((rm, rv), (&bm, &bv)) in self.mean[s.slot]
            .iter_mut()
            .zip(self.var[s.slot].iter_mut())
            .zip(s.mean.iter().zip(&s.var))
        {
            *rm = keep * *rm + momentum * bm;
            *rv = keep * *rv + momentum * bv * unbias;
        }
    }
}
