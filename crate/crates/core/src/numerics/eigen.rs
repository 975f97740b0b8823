// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cyclic Jacobi eigendecomposition and spectral matrix functions.
//!
//! The solver works on an `f64` copy of the input. Each sweep visits every
//! off-diagonal pair `(p, q)` in row order and applies the rotation that
//! annihilates `a[p][q]`. Eigenpairs are returned sorted descending, with each
//! eigenvector's largest-magnitude entry made positive so results are
//! reproducible.

use super::tensor::{SymmetricMatrix, TensorF32};
use crate::error::{MegaError, Result};

const MAX_SWEEPS: usize = 100;

/// Eigenvalues (descending) and eigenvectors (columns of `vectors`).
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f32>,
    /// `dim x dim`, column `j` is the eigenvector for `values[j]`.
    pub vectors: TensorF32,
}

/// Eigendecomposition of a symmetric matrix.
pub fn sym_eig(s: &SymmetricMatrix) -> Result<SymEig> {
    let n = s.dim();
    let (w, v) = jacobi_f64(&symmetrize(&s.to_f64(), n), n)?;
    let vectors = TensorF32::new(vec![n, n], v.iter().map(|x| *x as f32).collect())?;
    Ok(SymEig {
        values: w.iter().map(|x| *x as f32).collect(),
        vectors,
    })
}

/// Principal square root of a numerically PSD matrix.
///
/// Eigenvalues below zero are replaced by `floor` before taking roots; an
/// eigenvalue below `-1e-3 * max|w|` is rejected as indefinite.
pub fn sqrtm_psd(s: &SymmetricMatrix, floor: f32) -> Result<SymmetricMatrix> {
    let n = s.dim();
    let out = sqrtm_psd_f64(&s.to_f64(), n, f64::from(floor))?;
    Ok(SymmetricMatrix::from_f64_unchecked(n, &out))
}

// ---------------------------------------------------------------------------
// f64 kernels shared with PCA and transport fitting
// ---------------------------------------------------------------------------

pub(crate) fn symmetrize(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = a.to_vec();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            out[i * n + j] = m;
            out[j * n + i] = m;
        }
    }
    out
}

/// Cyclic Jacobi on a symmetric `n x n` row-major matrix.
///
/// Returns `(eigenvalues descending, eigenvectors as columns of a row-major
/// n x n matrix)`.
pub(crate) fn jacobi_f64(input: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = input.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if input.iter().any(|x| !x.is_finite()) {
        return Err(MegaError::NonFinite("eigensolver input".into()));
    }
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += a[p * n + q] * a[p * n + q];
            }
        }
        s.sqrt()
    };

    let mut converged = total == 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Skip rotations that cannot change the diagonal in f64.
                if apq.abs() < 1e-18 * (app.abs() + aqq.abs()) {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) <= 1e-14 * total;
    }
    if !converged {
        let off = off_norm(&a);
        if off > 1e-10 * total {
            return Err(MegaError::NoConvergence { sweeps, off });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0f64; n * n];
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for k in 0..n {
            if v[k * n + src].abs() > v[pivot * n + src].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[k * n + dst] = sign * v[k * n + src];
        }
    }
    Ok((values, vectors))
}

/// `V · diag(f(w)) · Vᵀ` for the eigendecomposition of `a`.
pub(crate) fn spectral_map(w: &[f64], v: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let fw: Vec<f64> = w.iter().map(|x| f(*x)).collect();
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += v[i * n + k] * fw[k] * v[j * n + k];
            }
            out[i * n + j] = acc;
            out[j * n + i] = acc;
        }
    }
    out
}

pub(crate) fn sqrtm_psd_f64(a: &[f64], n: usize, floor: f64) -> Result<Vec<f64>> {
    let (w, v) = jacobi_f64(&symmetrize(a, n), n)?;
    let scale = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(&min) = w.last() {
        if min < -1e-3 * scale {
            return Err(MegaError::Indefinite {
                eigenvalue: min,
                norm: scale,
            });
        }
    }
    Ok(spectral_map(&w, &v, n, |x| {
        if x < 0.0 {
            floor.sqrt()
        } else {
            x.sqrt()
        }
    }))
}

/// Inverse square root of a positive-definite matrix.
pub(crate) fn inv_sqrtm_pd_f64(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (w, v) = jacobi_f64(&symmetrize(a, n), n)?;
    if let Some(&min) = w.last() {
        if min <= 0.0 {
            return Err(MegaError::Indefinite {
                eigenvalue: min,
                norm: w.first().copied().unwrap_or(0.0).abs(),
            });
        }
    }
    let root = spectral_map(&w, &v, n, f64::sqrt);
    let inv_root = spectral_map(&w, &v, n, |x| 1.0 / x.sqrt());
    Ok((root, inv_root))
}

/// Row-major `n x n` product in `f64`.
pub(crate) fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}
