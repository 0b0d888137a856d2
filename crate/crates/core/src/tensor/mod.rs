//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Values are `f64` throughout; checkpoints round to `f32` on disk (see
//! [`checkpoint`]). A [`Tape`](tape::Tape) records every forward operation
//! and replays them in reverse to produce gradients.

pub mod checkpoint;
pub mod tape;

use thiserror::Error;

/// Stand-in for log(0) used wherever a cell must carry no probability mass.
/// Finite so that gradients stay defined; `exp(NEG_LOG)` underflows to 0.0.
pub const NEG_LOG: f64 = -1e9;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of bounds for size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("logsumexp slice is fully empty of mass (infeasible)")]
    EmptySlice,
}

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "Tensor::new",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn fill(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Identity matrix of size n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Value at a multi-dimensional index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        flat
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain value-level matrix multiply, (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose2",
                msg: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Elementwise map, value level.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// out += is NOT performed; out is overwritten. Row-major, no blocking —
/// matrices in this artifact stay small.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Max-shifted log-sum-exp of a slice. Returns NEG_LOG-order values rather
/// than -inf when every entry is at the mass floor.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let m = Tensor::new(&[3, 3], (0..9).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
        let out = Tensor::eye(3).matmul(&m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn logsumexp_uniform_pair() {
        assert!((logsumexp_slice(&[0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_large_values_stable() {
        let v = logsumexp_slice(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_all_floor_is_finite_shifted() {
        let v = logsumexp_slice(&[NEG_LOG, NEG_LOG]);
        assert!((v - (NEG_LOG + std::f64::consts::LN_2)).abs() < 1e-3);
    }
}
