//! Dense-matrix oracles for unit tests.

use nalgebra::{DMatrix, DVector};

use crate::forward::SciSystem;
use crate::tensor::Tensor;

/// `H = [D_1, ..., D_B]` with `D_b = diag(vec(C_b))`, acting on the
/// frame-major vectorization of a `[B, H, W]` cube.
pub fn dense_h(sys: &SciSystem) -> DMatrix<f64> {
    let [b, h, w] = sys.cube_dims();
    let n = h * w;
    let mut m = DMatrix::zeros(n, n * b);
    for f in 0..b {
        for i in 0..n {
            m[(i, f * n + i)] = sys.masks().frame_slice(f)[i];
        }
    }
    m
}

/// Solves `(γ̄₂ I + γ₁ HᵀH) x = rhs` densely.
pub fn dense_projection(
    sys: &SciSystem,
    terms: &[(&Tensor, &Tensor, f64)],
    y: &Tensor,
    lambda1: &Tensor,
    gamma1: f64,
) -> (Tensor, DMatrix<f64>, DVector<f64>) {
    let h = dense_h(sys);
    let n = h.ncols();
    let gamma2: f64 = terms.iter().map(|t| t.2).sum();
    let a = DMatrix::identity(n, n) * gamma2 + h.transpose() * &h * gamma1;
    let mut rhs = DVector::zeros(n);
    for (v, l2, g2) in terms {
        rhs += DVector::from_column_slice(l2.data()) + DVector::from_column_slice(v.data()) * *g2;
    }
    let data_term = DVector::from_column_slice(y.data()) * gamma1 - DVector::from_column_slice(lambda1.data());
    rhs += h.transpose() * data_term;
    let x = a.clone().lu().solve(&rhs).expect("system is positive definite");
    let t = Tensor::new(sys.cube_dims().to_vec(), x.iter().copied().collect()).unwrap();
    (t, a, rhs)
}
