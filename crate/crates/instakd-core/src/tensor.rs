//! Dense row-major f64 tensors.
//!
//! Everything in this crate runs in double precision so that oracle and
//! finite-difference comparisons can use tight tolerances.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} need {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index into an NCHW tensor.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 4);
        let (dc, dh, dw) = (self.dims[1], self.dims[2], self.dims[3]);
        self.data[((n * dc + c) * dh + h) * dw + w]
    }

    #[inline]
    pub fn at4_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        debug_assert_eq!(self.dims.len(), 4);
        let (dc, dh, dw) = (self.dims[1], self.dims[2], self.dims[3]);
        &mut self.data[((n * dc + c) * dh + h) * dw + w]
    }

    /// Index into a CHW (or any rank-3) tensor.
    #[inline]
    pub fn at3(&self, a: usize, b: usize, c: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 3);
        let (db, dc) = (self.dims[1], self.dims[2]);
        self.data[(a * db + b) * dc + c]
    }

    #[inline]
    pub fn at3_mut(&mut self, a: usize, b: usize, c: usize) -> &mut f64 {
        debug_assert_eq!(self.dims.len(), 3);
        let (db, dc) = (self.dims[1], self.dims[2]);
        &mut self.data[(a * db + b) * dc + c]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[i * self.dims[1] + j]
    }

    #[inline]
    pub fn at2_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert_eq!(self.dims.len(), 2);
        let cols = self.dims[1];
        &mut self.data[i * cols + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "zip of {:?} with {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Numerically stable softmax over an index subset, written into `out`.
pub fn softmax_into(logits: &[f64], idx: &[usize], out: &mut [f64]) {
    if idx.is_empty() {
        return;
    }
    let mut max = f64::NEG_INFINITY;
    for &i in idx {
        max = max.max(logits[i]);
    }
    let mut sum = 0.0;
    for &i in idx {
        let e = (logits[i] - max).exp();
        out[i] = e;
        sum += e;
    }
    for &i in idx {
        out[i] /= sum;
    }
}
