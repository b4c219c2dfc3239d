use coverage_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of consecutive slices in one classifier input.
pub const STACK_DEPTH: usize = 3;

/// Three consecutive square slices, stored slice-major: `data[(s * size + y) * size + x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    size: usize,
    data: Vec<f32>,
}

impl Stack {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != STACK_DEPTH * size * size {
            return Err(Error::ShapeMismatch {
                expected: format!("{STACK_DEPTH}x{size}x{size}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; STACK_DEPTH * size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn slice(&self, s: usize) -> &[f32] {
        let p = self.size * self.size;
        &self.data[s * p..(s + 1) * p]
    }

    pub fn slice_mut(&mut self, s: usize) -> &mut [f32] {
        let p = self.size * self.size;
        &mut self.data[s * p..(s + 1) * p]
    }

    pub fn at(&self, s: usize, y: usize, x: usize) -> f32 {
        self.data[(s * self.size + y) * self.size + x]
    }

    /// Pixelwise mean of the three slices.
    pub fn mean_projection(&self) -> Vec<f32> {
        let p = self.size * self.size;
        (0..p)
            .map(|i| {
                (0..STACK_DEPTH).map(|s| self.data[s * p + i]).sum::<f32>() / STACK_DEPTH as f32
            })
            .collect()
    }

    /// `[1, 1, 3, size, size]` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            &[1, 1, STACK_DEPTH, self.size, self.size],
            self.data.clone(),
        )
        .expect("stack length is validated")
    }

    pub fn batch_tensor(stacks: &[&Stack]) -> Result<Tensor<f32>> {
        let size = stacks.first().map(|s| s.size).unwrap_or(0);
        let mut data = Vec::with_capacity(stacks.len() * STACK_DEPTH * size * size);
        for s in stacks {
            if s.size != size {
                return Err(Error::ShapeMismatch {
                    expected: format!("{size}x{size}"),
                    got: format!("{0}x{0}", s.size),
                });
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Tensor::from_vec(
            &[stacks.len(), 1, STACK_DEPTH, size, size],
            data,
        )?)
    }

    pub fn check_size(&self, size: usize) -> Result<()> {
        if self.size != size {
            return Err(Error::ShapeMismatch {
                expected: format!("{STACK_DEPTH}x{size}x{size}"),
                got: format!("{STACK_DEPTH}x{0}x{0}", self.size),
            });
        }
        Ok(())
    }
}

/// Binary voxel mask with the same layout as [`Stack`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    size: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(size: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != STACK_DEPTH * size * size {
            return Err(Error::ShapeMismatch {
                expected: format!("{STACK_DEPTH}x{size}x{size}"),
                got: format!("{} voxels", bits.len()),
            });
        }
        Ok(Self { size, bits })
    }

    pub fn empty(size: usize) -> Self {
        Self {
            size,
            bits: vec![false; STACK_DEPTH * size * size],
        }
    }

    pub fn full(size: usize) -> Self {
        Self {
            size,
            bits: vec![true; STACK_DEPTH * size * size],
        }
    }

    /// Replicate a 2D `size x size` mask across all slices.
    pub fn from_plane(size: usize, plane: &[bool]) -> Result<Self> {
        if plane.len() != size * size {
            return Err(Error::ShapeMismatch {
                expected: format!("{size}x{size}"),
                got: format!("{} pixels", plane.len()),
            });
        }
        let mut bits = Vec::with_capacity(STACK_DEPTH * plane.len());
        for _ in 0..STACK_DEPTH {
            bits.extend_from_slice(plane);
        }
        Ok(Self { size, bits })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

pub(crate) fn write_f32s(path: &std::path::Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32s(path: &std::path::Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::malformed(path, "length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Side length of a `3 x s x s` array of `len` values.
pub(crate) fn side_of(len: usize) -> Option<usize> {
    let plane = len / STACK_DEPTH;
    let s = (plane as f64).sqrt().round() as usize;
    (len % STACK_DEPTH == 0 && s * s == plane).then_some(s)
}
