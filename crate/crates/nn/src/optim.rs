//! First-order optimizers over a [`ParamStore`].

use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub trait Optimizer<T: Float> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]);
}

/// Stochastic gradient descent with optional classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl<T: Float> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Float> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        s
    }

    fn grad(s: &ParamStore<f64>) -> Vec<Tensor<f64>> {
        // f = x0^2 + x1^2
        vec![s.tensors()[0].map(|v| 2.0 * v)]
    }

    #[test]
    fn sgd_descends_a_bowl() {
        let mut s = quad_store();
        let mut opt = Sgd::new(0.1, 0.0);
        for _ in 0..100 {
            let g = grad(&s);
            opt.step(&mut s, &g);
        }
        assert!(s.tensors()[0].data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn adam_descends_a_bowl() {
        let mut s = quad_store();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = grad(&s);
            opt.step(&mut s, &g);
        }
        assert!(s.tensors()[0].data().iter().all(|v| v.abs() < 1e-2));
    }
}
