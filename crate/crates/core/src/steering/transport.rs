// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form linear optimal transport between Gaussian moment estimates.
//!
//! With `Σs`, `Σt` the sample covariances plus `λI`, the Monge map between
//! `N(μs, Σs)` and `N(μt, Σt)` is `m(h) = A·h + b` with
//!
//! ```text
//! A = Σs^{-1/2} · (Σs^{1/2} · Σt · Σs^{1/2})^{1/2} · Σs^{-1/2}
//! b = μt - A·μs
//! ```

use crate::error::{MegaError, Result};
use crate::numerics::{
    check_finite, inv_sqrtm_pd_f64, matmul_sq, sqrtm_psd_f64, symmetrize, PcaProjector, TensorF32,
};

/// Affine map `m(z) = A·z + b` in PCA coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMap {
    /// `k x k`, symmetric PSD.
    pub a: TensorF32,
    pub b: Vec<f32>,
    pub lambda: f64,
}

impl TransportMap {
    pub fn identity(k: usize) -> Self {
        Self {
            a: TensorF32::identity(k),
            b: vec![0.0; k],
            lambda: 0.0,
        }
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }

    /// `A·z + b` in `f64`.
    pub fn apply_f64(&self, z: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|i| {
                f64::from(self.b[i])
                    + self
                        .a
                        .row(i)
                        .iter()
                        .zip(z)
                        .map(|(a, x)| f64::from(*a) * x)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn apply(&self, z: &[f32]) -> Vec<f32> {
        let z: Vec<f64> = z.iter().map(|v| f64::from(*v)).collect();
        self.apply_f64(&z).iter().map(|v| *v as f32).collect()
    }
}

fn mean_and_cov(x: &TensorF32, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = (x.rows(), x.cols());
    let mean = x.column_means();
    let mut cov = vec![0.0f64; k * k];
    for i in 0..n {
        let row = x.row(i);
        for a in 0..k {
            let da = f64::from(row[a]) - mean[a];
            for b in a..k {
                cov[a * k + b] += da * (f64::from(row[b]) - mean[b]);
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            let v = cov[a * k + b] / (n - 1) as f64;
            cov[a * k + b] = v;
            cov[b * k + a] = v;
        }
        cov[a * k + a] += lambda;
    }
    (mean, cov)
}

/// Fit the regularized Gaussian Monge map from `src` rows to `tgt` rows.
pub fn fit_transport(src: &TensorF32, tgt: &TensorF32, lambda: f64) -> Result<TransportMap> {
    if src.shape().len() != 2 || tgt.shape().len() != 2 || src.cols() != tgt.cols() {
        return Err(MegaError::Shape(format!(
            "transport needs n x k and m x k samples, got {:?} and {:?}",
            src.shape(),
            tgt.shape()
        )));
    }
    if src.rows() < 2 || tgt.rows() < 2 {
        return Err(MegaError::Input("transport needs at least 2 samples per side".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(MegaError::Input(format!("invalid regularization {lambda}")));
    }
    check_finite("transport source", src.data())?;
    check_finite("transport target", tgt.data())?;
    let k = src.cols();
    let (mu_s, cov_s) = mean_and_cov(src, lambda);
    let (mu_t, cov_t) = mean_and_cov(tgt, lambda);

    let (root_s, inv_root_s) = inv_sqrtm_pd_f64(&cov_s, k)?;
    let middle = symmetrize(&matmul_sq(&matmul_sq(&root_s, &cov_t, k), &root_s, k), k);
    let middle_root = sqrtm_psd_f64(&middle, k, 0.0)?;
    let a = symmetrize(
        &matmul_sq(&matmul_sq(&inv_root_s, &middle_root, k), &inv_root_s, k),
        k,
    );
    let b: Vec<f64> = (0..k)
        .map(|i| mu_t[i] - (0..k).map(|j| a[i * k + j] * mu_s[j]).sum::<f64>())
        .collect();
    let map = TransportMap {
        a: TensorF32::new(vec![k, k], a.iter().map(|v| *v as f32).collect())?,
        b: b.iter().map(|v| *v as f32).collect(),
        lambda,
    };
    check_finite("transport offset", &map.b)?;
    Ok(map)
}

/// Apply `map` inside the projector's subspace, leaving the orthogonal
/// complement of `h` untouched:
/// `z = P·(h - μ)`, `h' = h + Pᵀ·(A·z + b - z)`.
pub fn steer_transform(h: &[f32], projector: &PcaProjector, map: &TransportMap) -> Vec<f32> {
    let z = projector.project_f64(h);
    let mapped = map.apply_f64(&z);
    let dz: Vec<f64> = mapped.iter().zip(&z).map(|(m, z)| m - z).collect();
    let mut out: Vec<f64> = h.iter().map(|v| f64::from(*v)).collect();
    projector.add_lifted(&mut out, &dz);
    out.iter().map(|v| *v as f32).collect()
}
