// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra: tensors, symmetric eigendecomposition, PSD square
//! roots and PCA. Storage is `f32`; reductions accumulate in `f64` in a fixed
//! order so results do not depend on thread count.

mod eigen;
mod pca;
mod tensor;

pub use eigen::{sqrtm_psd, sym_eig, SymEig};
pub use pca::{pca_fit, PcaFit, PcaOptions, PcaProjector};
pub use tensor::{distance, dot, norm, SymmetricMatrix, TensorF32};

pub(crate) use eigen::{inv_sqrtm_pd_f64, matmul_sq, sqrtm_psd_f64, symmetrize};
pub(crate) use tensor::check_finite;
