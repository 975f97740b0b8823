// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and symmetric matrices.

use crate::error::{MegaError, Result};

/// Dot product with `f64` accumulation in fixed left-to-right order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// Euclidean norm with `f64` accumulation.
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean distance between two equal-length vectors.
pub fn distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = f64::from(*x) - f64::from(*y);
        acc += d * d;
    }
    acc.sqrt()
}

pub(crate) fn check_finite(what: &str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MegaError::NonFinite(what.to_string()))
    }
}

// ---------------------------------------------------------------------------
// TensorF32
// ---------------------------------------------------------------------------

/// Flat row-major `f32` tensor. Construction rejects shape/length mismatches
/// and non-finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(MegaError::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MegaError::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        check_finite("tensor", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 2-D tensor from a list of equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(MegaError::Shape("ragged rows".into()));
        }
        Self::new(vec![n, d], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    fn require_2d(&self, what: &str) -> Result<()> {
        if self.shape.len() == 2 {
            Ok(())
        } else {
            Err(MegaError::Shape(format!(
                "{what} needs a 2-D tensor, got {:?}",
                self.shape
            )))
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        self.require_2d("transpose")?;
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.require_2d("matmul")?;
        other.require_2d("matmul")?;
        if self.cols() != other.rows() {
            return Err(MegaError::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let ot = other.transpose()?;
        let (n, m) = (self.rows(), other.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.push(dot(a, ot.row(j)) as f32);
            }
        }
        let t = Self {
            shape: vec![n, m],
            data: out,
        };
        check_finite("matmul result", &t.data)?;
        Ok(t)
    }

    /// Matrix-vector product `self · v`.
    pub fn matvec(&self, v: &[f32]) -> Result<Vec<f32>> {
        self.require_2d("matvec")?;
        if self.cols() != v.len() {
            return Err(MegaError::Shape(format!(
                "matvec {:?} x [{}]",
                self.shape,
                v.len()
            )));
        }
        Ok((0..self.rows()).map(|i| dot(self.row(i), v) as f32).collect())
    }

    /// Column means of a 2-D tensor, accumulated in `f64`.
    pub fn column_means(&self) -> Vec<f64> {
        let (n, d) = (self.rows(), self.cols());
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(self.row(i)) {
                *m += f64::from(*x);
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        mean
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    /// Vertically stack 2-D tensors with equal column counts.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let d = parts
            .first()
            .map(|p| p.cols())
            .ok_or_else(|| MegaError::Shape("vstack of nothing".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            p.require_2d("vstack")?;
            if p.cols() != d {
                return Err(MegaError::Shape("vstack column mismatch".into()));
            }
            n += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![n, d], data)
    }
}

// ---------------------------------------------------------------------------
// SymmetricMatrix
// ---------------------------------------------------------------------------

/// Square row-major matrix that is symmetric within
/// `|S[i,j] - S[j,i]| <= 1e-5 * (1 + |S[i,j]|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl SymmetricMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(MegaError::Shape(format!(
                "symmetric matrix of dim {dim} needs {} values, got {}",
                dim * dim,
                data.len()
            )));
        }
        check_finite("symmetric matrix", &data)?;
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = f64::from(data[i * dim + j]);
                let b = f64::from(data[j * dim + i]);
                let gap = (a - b).abs();
                if gap > 1e-5 * (1.0 + a.abs()) {
                    return Err(MegaError::NotSymmetric {
                        row: i,
                        col: j,
                        gap,
                    });
                }
            }
        }
        Ok(Self { dim, data })
    }

    /// Build from a 2-D tensor, checking symmetry.
    pub fn from_tensor(t: &TensorF32) -> Result<Self> {
        if t.shape().len() != 2 || t.rows() != t.cols() {
            return Err(MegaError::Shape(format!(
                "expected square matrix, got {:?}",
                t.shape()
            )));
        }
        Self::new(t.rows(), t.data().to_vec())
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn diag(values: &[f32]) -> Self {
        let dim = values.len();
        let mut data = vec![0.0; dim * dim];
        for (i, v) in values.iter().enumerate() {
            data[i * dim + i] = *v;
        }
        Self { dim, data }
    }

    pub(crate) fn from_f64_unchecked(dim: usize, data: &[f64]) -> Self {
        Self {
            dim,
            data: data.iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.dim + j]
    }

    pub fn to_tensor(&self) -> TensorF32 {
        TensorF32 {
            shape: vec![self.dim, self.dim],
            data: self.data.clone(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| f64::from(*v)).collect()
    }
}
