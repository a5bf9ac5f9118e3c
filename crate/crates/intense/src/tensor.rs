//! Dense n-dimensional tensors of 64-bit floats in row-major order.
//!
//! `Tensor` is the universal value type of the crate: representations,
//! weights, gradients, and moment caches are all tensors. A scalar is a
//! rank-0 tensor with a single element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense tensor with shape metadata; data is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` accounts for every element.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "scalar_value on tensor of len {}", self.len());
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the data under a new shape of equal length.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Contract(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled_assign(&mut self, other: &Tensor, c: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    /// Inner product of two same-length tensors (flattened row-major).
    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Sum of squared elements.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Outer product: `out[i..., j...] = self[i...] * other[j...]`; shape is
    /// the concatenation of both shapes.
    pub fn outer(&self, other: &Tensor) -> Tensor {
        let mut shape = self.shape.clone();
        shape.extend_from_slice(&other.shape);
        let mut data = Vec::with_capacity(self.len() * other.len());
        for &a in &self.data {
            for &b in &other.data {
                data.push(a * b);
            }
        }
        Tensor { shape, data }
    }

    /// Reorders axes: output axis `k` carries input axis `perm[k]`.
    pub fn permute_axes(&self, perm: &[usize]) -> Tensor {
        let rank = self.rank();
        assert_eq!(perm.len(), rank, "permutation rank mismatch");
        let mut seen = vec![false; rank];
        for &a in perm {
            assert!(a < rank && !seen[a], "invalid permutation {perm:?}");
            seen[a] = true;
        }
        if rank <= 1 {
            return self.clone();
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&a| self.shape[a]).collect();
        let gather: Vec<usize> = perm.iter().map(|&a| in_strides[a]).collect();
        let mut data = vec![0.0; self.len()];
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for slot in data.iter_mut() {
            *slot = self.data[offset];
            // row-major odometer over the output shape
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                offset += gather[axis];
                if idx[axis] < out_shape[axis] {
                    break;
                }
                offset -= gather[axis] * out_shape[axis];
                idx[axis] = 0;
            }
        }
        Tensor {
            shape: out_shape,
            data,
        }
    }

    /// Stacks same-shape tensors into one tensor with a new leading axis.
    pub fn stack(batch: &[Tensor]) -> Tensor {
        assert!(!batch.is_empty(), "cannot stack an empty batch");
        let inner = batch[0].shape.clone();
        let mut shape = vec![batch.len()];
        shape.extend_from_slice(&inner);
        let mut data = Vec::with_capacity(batch.len() * batch[0].len());
        for t in batch {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        Tensor { shape, data }
    }

    /// Splits a stacked tensor back into its leading-axis rows.
    pub fn unstack(&self) -> Vec<Tensor> {
        assert!(self.rank() >= 1, "unstack needs rank >= 1");
        let rows = self.shape[0];
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let chunk = self.len() / rows.max(1);
        (0..rows)
            .map(|i| Tensor {
                shape: inner.clone(),
                data: self.data[i * chunk..(i + 1) * chunk].to_vec(),
            })
            .collect()
    }

    /// Mean over the leading axis of a stacked tensor.
    pub fn mean_axis0(&self) -> Tensor {
        assert!(self.rank() >= 1, "mean_axis0 needs rank >= 1");
        let rows = self.shape[0];
        assert!(rows > 0, "mean_axis0 over an empty axis");
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let chunk = self.len() / rows;
        let mut out = vec![0.0; chunk];
        for i in 0..rows {
            let row = &self.data[i * chunk..(i + 1) * chunk];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / rows as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        Tensor {
            shape: inner,
            data: out,
        }
    }
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}
