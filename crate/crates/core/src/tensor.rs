//! Dense row-major `f64` tensors and the raw kernels the tape builds on.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;

/// A dense row-major tensor of 64-bit floats.
///
/// The element count always equals the product of `shape` (an empty shape is a
/// scalar holding one value) and every element is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from kernel output that is already known to have the right length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::new(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar { shape: self.shape.clone() })
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::ShapeMismatch { op, detail: format!("expected a matrix, got shape {other:?}") }),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// Accumulates `da[m,k] += dc[m,n] · b[k,n]ᵀ`.
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in dcrow.iter().zip(brow) {
                acc += x * y;
            }
            da[i * k + p] += acc;
        }
    }
}

/// Accumulates `db[k,n] += a[m,k]ᵀ · dc[m,n]`.
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, g) in dbrow.iter_mut().zip(dcrow) {
                *d += aip * g;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax. With `causal`, row `i` only spans columns `0..=i` and the rest are zero.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let width = if causal { (r + 1).min(cols) } else { cols };
        let src = &x[r * cols..r * cols + width];
        let dst = &mut out[r * cols..r * cols + width];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// `log Σ exp(row)` computed stably.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
