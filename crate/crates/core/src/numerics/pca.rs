// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal component analysis through symmetric eigendecomposition.

use super::eigen::jacobi_f64;
use super::tensor::{check_finite, TensorF32};
use crate::error::{MegaError, Result};

/// Affine projection onto a k-dimensional principal subspace.
///
/// `basis` is `k x d` with orthonormal rows; `project(h) = P·(h - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjector {
    mean: Vec<f32>,
    basis: TensorF32,
}

impl PcaProjector {
    /// Build from parts, checking shapes and row orthonormality (1e-4).
    pub fn new(mean: Vec<f32>, basis: TensorF32) -> Result<Self> {
        if basis.shape().len() != 2 || basis.cols() != mean.len() {
            return Err(MegaError::Shape(format!(
                "PCA basis {:?} does not match mean of length {}",
                basis.shape(),
                mean.len()
            )));
        }
        check_finite("PCA mean", &mean)?;
        let p = Self { mean, basis };
        let gap = p.orthonormality_gap();
        if gap > 1e-4 {
            return Err(MegaError::Shape(format!(
                "PCA basis rows are not orthonormal (max |PPᵀ - I| = {gap:e})"
            )));
        }
        Ok(p)
    }

    /// Full-space projector with zero mean and identity basis.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            basis: TensorF32::identity(d),
        }
    }

    pub fn k(&self) -> usize {
        self.basis.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn basis(&self) -> &TensorF32 {
        &self.basis
    }

    /// Coordinates `P·(h - mean)`.
    pub fn project(&self, h: &[f32]) -> Vec<f32> {
        self.project_f64(h).iter().map(|v| *v as f32).collect()
    }

    pub(crate) fn project_f64(&self, h: &[f32]) -> Vec<f64> {
        (0..self.k())
            .map(|i| {
                self.basis
                    .row(i)
                    .iter()
                    .zip(h.iter().zip(&self.mean))
                    .map(|(p, (x, m))| f64::from(*p) * (f64::from(*x) - f64::from(*m)))
                    .sum()
            })
            .collect()
    }

    /// `mean + Pᵀ·z`.
    pub fn reconstruct(&self, z: &[f32]) -> Vec<f32> {
        let mut out: Vec<f64> = self.mean.iter().map(|m| f64::from(*m)).collect();
        self.add_lifted(&mut out, &z.iter().map(|v| f64::from(*v)).collect::<Vec<_>>());
        out.iter().map(|v| *v as f32).collect()
    }

    /// `out += Pᵀ·dz`.
    pub(crate) fn add_lifted(&self, out: &mut [f64], dz: &[f64]) {
        for (i, c) in dz.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.basis.row(i)) {
                *o += c * f64::from(*p);
            }
        }
    }

    /// Project every row of an `n x d` matrix into `n x k` coordinates.
    pub fn project_rows(&self, data: &TensorF32) -> Result<TensorF32> {
        if data.cols() != self.dim() {
            return Err(MegaError::Shape(format!(
                "cannot project rows of width {} with a {}-dim projector",
                data.cols(),
                self.dim()
            )));
        }
        let mut out = Vec::with_capacity(data.rows() * self.k());
        for i in 0..data.rows() {
            out.extend(self.project(data.row(i)));
        }
        TensorF32::new(vec![data.rows(), self.k()], out)
    }

    /// Largest absolute deviation of `P·Pᵀ` from the identity.
    pub fn orthonormality_gap(&self) -> f64 {
        let k = self.k();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let g = super::tensor::dot(self.basis.row(i), self.basis.row(j));
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - want).abs());
            }
        }
        worst
    }
}

/// Fitted projector plus spectrum diagnostics.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub projector: PcaProjector,
    /// Variance captured by each kept component, descending.
    pub explained_variance: Vec<f64>,
    /// `explained_variance / total variance`.
    pub explained_variance_ratio: Vec<f64>,
    /// Number of components with non-negligible variance.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PcaOptions {
    /// Accept zero-variance components, completing the basis with
    /// arbitrary orthonormal directions.
    pub allow_zero_variance: bool,
}

/// Relative eigenvalue cutoff below which a component counts as zero variance.
const RANK_TOL: f64 = 1e-10;

/// Fit a `k`-component PCA on the rows of an `n x d` matrix.
///
/// Uses the `d x d` covariance when `d <= n`, otherwise the `n x n` Gram
/// matrix; both normalized by `1/(n-1)`.
pub fn pca_fit(data: &TensorF32, k: usize, opts: PcaOptions) -> Result<PcaFit> {
    if data.shape().len() != 2 {
        return Err(MegaError::Shape("pca_fit needs a 2-D matrix".into()));
    }
    let (n, d) = (data.rows(), data.cols());
    if n < 2 || k == 0 || k > (n - 1).min(d) {
        return Err(MegaError::PcaRange { k, n, d });
    }
    let mean = data.column_means();
    let mut centered = vec![0.0f64; n * d];
    for i in 0..n {
        for (j, x) in data.row(i).iter().enumerate() {
            centered[i * d + j] = f64::from(*x) - mean[j];
        }
    }
    let denom = (n - 1) as f64;

    let (values, mut directions) = if d <= n {
        let mut cov = vec![0.0f64; d * d];
        for i in 0..n {
            let row = &centered[i * d..(i + 1) * d];
            for a in 0..d {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..d {
                    cov[a * d + b] += ra * row[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] / denom;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        let (w, v) = jacobi_f64(&cov, d)?;
        let dirs: Vec<Option<Vec<f64>>> = (0..k)
            .map(|c| Some((0..d).map(|r| v[r * d + c]).collect()))
            .collect();
        (w, dirs)
    } else {
        let mut gram = vec![0.0f64; n * n];
        for a in 0..n {
            for b in a..n {
                let s: f64 = centered[a * d..(a + 1) * d]
                    .iter()
                    .zip(&centered[b * d..(b + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    / denom;
                gram[a * n + b] = s;
                gram[b * n + a] = s;
            }
        }
        let (w, u) = jacobi_f64(&gram, n)?;
        let top = w.first().copied().unwrap_or(0.0).max(0.0);
        let dirs: Vec<Option<Vec<f64>>> = (0..k)
            .map(|c| {
                if w[c] <= RANK_TOL * top || w[c] <= 0.0 {
                    return None;
                }
                let mut v = vec![0.0f64; d];
                for r in 0..n {
                    let ur = u[r * n + c];
                    for (vj, x) in v.iter_mut().zip(&centered[r * d..(r + 1) * d]) {
                        *vj += ur * x;
                    }
                }
                Some(v)
            })
            .collect();
        (w, dirs)
    };

    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if top <= 0.0 || total <= 0.0 {
        if !opts.allow_zero_variance {
            return Err(MegaError::Degenerate);
        }
        directions.iter_mut().for_each(|v| *v = None);
    }
    let rank = values.iter().filter(|v| **v > RANK_TOL * top && top > 0.0).count();

    let basis = orthonormal_basis(directions, d);
    let explained_variance: Vec<f64> = values[..k].iter().map(|v| v.max(0.0)).collect();
    let explained_variance_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let basis = TensorF32::new(
        vec![k, d],
        basis.iter().flatten().map(|v| *v as f32).collect(),
    )?;
    Ok(PcaFit {
        projector: PcaProjector {
            mean: mean.iter().map(|m| *m as f32).collect(),
            basis,
        },
        explained_variance,
        explained_variance_ratio,
        rank,
    })
}

/// Gram-Schmidt over the supplied directions; missing ones are filled from
/// the standard basis.
fn orthonormal_basis(directions: Vec<Option<Vec<f64>>>, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(directions.len());
    let mut axis = 0;
    for dir in directions {
        let mut placed = false;
        if let Some(v) = dir {
            if let Some(u) = orthogonalize(v, &basis) {
                basis.push(u);
                placed = true;
            }
        }
        while !placed && axis < d {
            let mut e = vec![0.0; d];
            e[axis] = 1.0;
            axis += 1;
            if let Some(u) = orthogonalize(e, &basis) {
                basis.push(u);
                placed = true;
            }
        }
    }
    basis
}

fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let start: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if start == 0.0 {
        return None;
    }
    // Two passes of modified Gram-Schmidt.
    for _ in 0..2 {
        for b in basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
    }
    let len: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if len <= 1e-8 * start {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= len);
    let pivot = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Some(v)
}
