use crate::error::{NnError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `name:shape` lines; identical for any two stores built from the same architecture.
    pub fn layout(&self) -> String {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| format!("{n}:{:?}\n", t.shape()))
            .collect()
    }

    /// Little-endian `f32` concatenation of all tensors in insertion order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.count() * 4);
        for t in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    /// Overwrite values from a blob produced by [`Self::to_le_bytes`] on an identical layout.
    pub fn load_le_bytes(&mut self, bytes: &[u8]) -> Result<usize> {
        let need = self.count() * 4;
        if bytes.len() < need {
            return Err(NnError::BadBlob(format!(
                "need {need} bytes for parameters, have {}",
                bytes.len()
            )));
        }
        let mut chunks = bytes.chunks_exact(4);
        for t in &mut self.tensors {
            for v in t.data_mut() {
                let c = chunks.next().expect("length checked");
                *v = T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        Ok(need)
    }
}

/// Batch-norm running mean/variance buffers, one pair per normalization layer.
#[derive(Clone, Debug, Default)]
pub struct RunningStats<T> {
    pub(crate) mean: Vec<Vec<T>>,
    pub(crate) var: Vec<Vec<T>>,
}

impl<T: Float> RunningStats<T> {
    pub fn new() -> Self {
        Self {
            mean: Vec::new(),
            var: Vec::new(),
        }
    }

    pub fn add(&mut self, channels: usize) -> usize {
        self.mean.push(vec![T::zero(); channels]);
        self.var.push(vec![T::one(); channels]);
        self.mean.len() - 1
    }

    pub fn mean(&self, slot: usize) -> &[T] {
        &self.mean[slot]
    }

    pub fn var(&self, slot: usize) -> &[T] {
        &self.var[slot]
    }

    pub fn count(&self) -> usize {
        self.mean.iter().map(Vec::len).sum::<usize>() * 2
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.count() * 4);
        for (m, v) in self.mean.iter().zip(&self.var) {
            for x in m.iter().chain(v) {
                out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn load_le_bytes(&mut self, bytes: &[u8]) -> Result<usize> {
        let need = self.count() * 4;
        if bytes.len() < need {
            return Err(NnError::BadBlob(format!(
                "need {need} bytes for running stats, have {}",
                bytes.len()
            )));
        }
        let mut chunks = bytes.chunks_exact(4);
        for (m, v) in self.mean.iter_mut().zip(self.var.iter_mut()) {
            for x in m.iter_mut().chain(v.iter_mut()) {
                let c = chunks.next().expect("length checked");
                *x = T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        Ok(need)
    }
}
