#![allow(dead_code)]

use elp_core::{PriorTerm, Rng, SciSystem, Tensor};
use nalgebra::{DMatrix, DVector};

/// Explicit `H = [D_1, ..., D_B]` on the frame-major vectorization.
pub fn dense_h(sys: &SciSystem) -> DMatrix<f64> {
    let [b, h, w] = sys.cube_dims();
    let n = h * w;
    let mut m = DMatrix::zeros(n, n * b);
    for f in 0..b {
        for (i, &c) in sys.masks().frame_slice(f).iter().enumerate() {
            m[(i, f * n + i)] = c;
        }
    }
    m
}

/// LU solve of `(Σγ₂ I + γ₁ HᵀH) x = Σ(λ₂ + γ₂ v) + Hᵀ(γ₁ y − λ₁)`.
pub fn dense_projection(sys: &SciSystem, terms: &[PriorTerm], y: &Tensor, lambda1: &Tensor, gamma1: f64) -> Tensor {
    let h = dense_h(sys);
    let n = h.ncols();
    let vec = |t: &Tensor| DVector::from_column_slice(t.data());
    let g2: f64 = terms.iter().map(|t| t.gamma2).sum();
    let a = DMatrix::identity(n, n) * g2 + h.transpose() * &h * gamma1;
    let mut rhs = h.transpose() * (vec(y) * gamma1 - vec(lambda1));
    for t in terms {
        rhs += vec(&t.lambda2) + vec(&t.v) * t.gamma2;
    }
    let x = a.lu().solve(&rhs).expect("projection matrix is positive definite");
    Tensor::new(sys.cube_dims().to_vec(), x.iter().copied().collect()).unwrap()
}

/// Masks with a mix of binary and continuous entries; no pixel is dark in
/// every frame.
pub fn random_system(b: usize, h: usize, w: usize, rng: &mut Rng) -> SciSystem {
    let continuous = rng.bernoulli(0.5);
    let mut masks = Tensor::from_fn(&[b, h, w], |_| {
        if continuous {
            rng.uniform()
        } else if rng.bernoulli(0.5) {
            1.0
        } else {
            0.0
        }
    });
    let plane = h * w;
    for i in 0..plane {
        if (0..b).all(|f| masks.data()[f * plane + i] == 0.0) {
            let f = rng.below(b);
            masks.data_mut()[f * plane + i] = 1.0;
        }
    }
    SciSystem::new(masks).unwrap()
}

pub fn random_cube(dims: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.uniform_range(-1.0, 1.0))
}

pub fn log_uniform(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    (rng.uniform_range(lo.ln(), hi.ln())).exp()
}

pub fn relative(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().norm() / b.norm().max(f64::MIN_POSITIVE)
}
