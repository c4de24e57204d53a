//! The snapshot sensing process: B masked frames integrated into one coded image.
//!
//! The sensing matrix is never materialized. It is block-diagonal per frame,
//! so `H x` is a masked frame sum, `Hᵀ y` is a masked replication, and
//! `H Hᵀ` is the diagonal `psi = Σ_b C_b²`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SciSystem {
    masks: Tensor,
    psi: Tensor,
    mask_sum: Tensor,
}

impl SciSystem {
    /// Builds a system from `[B, H, W]` masks with values in `[0, 1]`.
    pub fn new(masks: Tensor) -> Result<Self> {
        if masks.rank() != 3 || masks.is_empty() {
            return Err(Error::shape(format!(
                "masks must be a non-empty [B, H, W] stack, got {:?}",
                masks.dims()
            )));
        }
        if let Some(bad) = masks.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("mask value {bad} outside [0, 1]")));
        }
        let psi = tensor::frame_sum(&masks.mul(&masks)?)?;
        let mask_sum = tensor::frame_sum(&masks)?;
        Ok(Self {
            masks,
            psi,
            mask_sum,
        })
    }

    /// Binary masks, each pixel open with probability `p`.
    ///
    /// A pixel whose draws are closed in every frame is redrawn, so every
    /// pixel is exposed at least once. Requires `p > 0` and `frames > 0`.
    pub fn bernoulli(frames: usize, height: usize, width: usize, p: f64, rng: &mut Rng) -> Self {
        assert!(p > 0.0 && frames > 0, "bernoulli masks need p > 0 and frames > 0");
        let plane = height * width;
        let mut data = vec![0.0; frames * plane];
        for i in 0..plane {
            loop {
                let mut open = false;
                for b in 0..frames {
                    let on = rng.bernoulli(p);
                    data[b * plane + i] = if on { 1.0 } else { 0.0 };
                    open |= on;
                }
                if open {
                    break;
                }
            }
        }
        let masks = Tensor::new(vec![frames, height, width], data).expect("sizes agree");
        Self::new(masks).expect("bernoulli masks are valid")
    }

    pub fn set_masks(&mut self, masks: Tensor) -> Result<()> {
        *self = Self::new(masks)?;
        Ok(())
    }

    pub fn masks(&self) -> &Tensor {
        &self.masks
    }

    /// Diagonal of `H Hᵀ`.
    pub fn psi(&self) -> &Tensor {
        &self.psi
    }

    pub fn mask_sum(&self) -> &Tensor {
        &self.mask_sum
    }

    pub fn frames(&self) -> usize {
        self.masks.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.masks.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.masks.dims()[2]
    }

    pub fn cube_dims(&self) -> [usize; 3] {
        [self.frames(), self.height(), self.width()]
    }

    pub fn plane_dims(&self) -> [usize; 2] {
        [self.height(), self.width()]
    }

    /// The system seen by the first `frames` masks only.
    pub fn leading_frames(&self, frames: usize) -> Result<SciSystem> {
        if frames == 0 || frames > self.frames() {
            return Err(Error::contract(format!(
                "cannot take {frames} of {} mask frames",
                self.frames()
            )));
        }
        let index: Vec<usize> = (0..frames).collect();
        Self::new(tensor::gather_frames(&self.masks, &index)?)
    }

    fn check_cube(&self, x: &Tensor) -> Result<()> {
        if x.dims() != self.masks.dims() {
            return Err(Error::shape(format!(
                "cube {:?} does not match masks {:?}",
                x.dims(),
                self.masks.dims()
            )));
        }
        Ok(())
    }

    fn check_plane(&self, y: &Tensor) -> Result<()> {
        if y.dims() != self.plane_dims() {
            return Err(Error::shape(format!(
                "measurement {:?} does not match mask plane {:?}",
                y.dims(),
                self.plane_dims()
            )));
        }
        Ok(())
    }

    /// `H x = Σ_b C_b ⊙ x_b`
    pub fn apply_h(&self, x: &Tensor) -> Result<Tensor> {
        self.check_cube(x)?;
        tensor::frame_sum(&x.mul(&self.masks)?)
    }

    /// `(Hᵀ y)_b = C_b ⊙ y`
    pub fn apply_ht(&self, y: &Tensor) -> Result<Tensor> {
        self.check_plane(y)?;
        tensor::frame_repeat(y, self.frames())?.mul(&self.masks)
    }

    /// Simulated snapshot: `Y = Σ_b C_b ⊙ X_b + Z`, `Z ~ N(0, sigma²)` i.i.d.
    pub fn encode(&self, scene: &Tensor, noise_sigma: f64, rng: &mut Rng) -> Result<Tensor> {
        if !(noise_sigma >= 0.0) {
            return Err(Error::contract(format!(
                "noise sigma must be non-negative, got {noise_sigma}"
            )));
        }
        let mut y = self.apply_h(scene)?;
        if noise_sigma > 0.0 {
            for v in y.data_mut() {
                *v += noise_sigma * rng.normal();
            }
        }
        Ok(y)
    }

    /// `Ȳ = Y ⊘ Σ_b C_b`, failing on the first pixel no mask ever opens.
    pub fn normalized_measurement(&self, y: &Tensor) -> Result<Tensor> {
        self.check_plane(y)?;
        self.check_exposure(&self.mask_sum)?;
        y.div(&self.mask_sum)
    }

    pub(crate) fn check_exposure(&self, plane: &Tensor) -> Result<()> {
        let w = self.width();
        match plane.data().iter().position(|&s| s <= 0.0) {
            Some(i) => Err(Error::DegenerateMask {
                row: i / w,
                col: i % w,
            }),
            None => Ok(()),
        }
    }

    /// Registers the masks on `tape` for differentiable `H` / `Hᵀ`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundSystem<'t> {
        BoundSystem {
            frames: self.frames(),
            masks: tape.constant(self.masks.clone()),
            psi: tape.constant(self.psi.clone()),
        }
    }
}

/// A [`SciSystem`] whose masks live on a tape.
#[derive(Clone, Copy)]
pub struct BoundSystem<'t> {
    frames: usize,
    masks: Var<'t>,
    psi: Var<'t>,
}

impl<'t> BoundSystem<'t> {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn psi(&self) -> Var<'t> {
        self.psi
    }

    pub fn apply_h(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.mul(self.masks)?.frame_sum()
    }

    pub fn apply_ht(&self, y: Var<'t>) -> Result<Var<'t>> {
        y.frame_repeat(self.frames)?.mul(self.masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::dense_h;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn bernoulli_masks_expose_every_pixel() {
        let mut rng = Rng::new(3);
        for frames in [1, 2, 3] {
            let sys = SciSystem::bernoulli(frames, 16, 16, 0.5, &mut rng);
            assert!(sys.mask_sum().data().iter().all(|&s| s >= 1.0));
        }
    }

    #[test]
    fn encode_examples() {
        let mut rng = Rng::new(0);
        let ones = SciSystem::new(Tensor::filled(&[2, 3, 3], 1.0)).unwrap();
        let y = ones.encode(&Tensor::filled(&[2, 3, 3], 1.0), 0.0, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));

        let zeros = SciSystem::new(Tensor::zeros(&[2, 3, 3])).unwrap();
        let y = zeros.encode(&Tensor::filled(&[2, 3, 3], 0.7), 0.0, &mut rng).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = t(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let c = t(&[2, 2, 2], &[1., 0., 0., 1., 0., 1., 1., 0.]);
        let sys = SciSystem::new(c).unwrap();
        let y = sys.encode(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y.data(), &[1., 6., 7., 4.]);
        assert_eq!(sys.normalized_measurement(&y).unwrap(), y);
    }

    #[test]
    fn encode_rejects_bad_dims() {
        let sys = SciSystem::new(Tensor::filled(&[2, 3, 3], 1.0)).unwrap();
        let mut rng = Rng::new(0);
        assert!(matches!(
            sys.encode(&Tensor::zeros(&[3, 3, 3]), 0.0, &mut rng),
            Err(Error::Shape(_))
        ));
        assert!(matches!(sys.apply_ht(&Tensor::zeros(&[3, 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn noise_is_seeded() {
        let mut rng = Rng::new(5);
        let sys = SciSystem::bernoulli(3, 4, 4, 0.5, &mut rng);
        let x = Tensor::filled(&[3, 4, 4], 0.5);
        let a = sys.encode(&x, 0.1, &mut Rng::new(9)).unwrap();
        let b = sys.encode(&x, 0.1, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sys.apply_h(&x).unwrap());
    }

    #[test]
    fn gram_and_replication() {
        let mut rng = Rng::new(1);
        let sys = SciSystem::bernoulli(4, 5, 3, 0.5, &mut rng);
        let y = Tensor::from_fn(&[5, 3], |_| rng.normal());
        let hhty = sys.apply_h(&sys.apply_ht(&y).unwrap()).unwrap();
        assert!(hhty.max_abs_diff(&sys.psi().mul(&y).unwrap()).unwrap() < 1e-15);

        let ones = SciSystem::new(Tensor::filled(&[3, 5, 3], 1.0)).unwrap();
        let rep = ones.apply_ht(&y).unwrap();
        for b in 0..3 {
            assert_eq!(rep.frame(b), y);
        }
    }

    #[test]
    fn apply_h_matches_dense_matrix() {
        let mut rng = Rng::new(2);
        let masks = Tensor::from_fn(&[2, 3, 3], |_| rng.uniform());
        let sys = SciSystem::new(masks).unwrap();
        let x = Tensor::from_fn(&[2, 3, 3], |_| rng.normal());
        let h = dense_h(&sys);
        let want = &h * DVector::from_column_slice(x.data());
        let got = sys.apply_h(&x).unwrap();
        for (a, b) in got.data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let y = Tensor::from_fn(&[3, 3], |_| rng.normal());
        let want_t = h.transpose() * DVector::from_column_slice(y.data());
        let got_t = sys.apply_ht(&y).unwrap();
        for (a, b) in got_t.data().iter().zip(want_t.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn normalized_measurement_cases() {
        let sys = SciSystem::new(Tensor::filled(&[4, 2, 2], 1.0)).unwrap();
        let y = t(&[2, 2], &[4., 8., 2., 1.]);
        assert_eq!(sys.normalized_measurement(&y).unwrap().data(), &[1., 2., 0.5, 0.25]);

        let mut masks = Tensor::filled(&[2, 3, 3], 1.0);
        masks.data_mut()[5] = 0.0;
        masks.data_mut()[9 + 5] = 0.0;
        let sys = SciSystem::new(masks).unwrap();
        let err = sys.normalized_measurement(&Tensor::zeros(&[3, 3])).unwrap_err();
        assert!(matches!(err, Error::DegenerateMask { row: 1, col: 2 }));
    }

    #[test]
    fn masks_outside_unit_interval_are_rejected() {
        assert!(SciSystem::new(Tensor::filled(&[1, 2, 2], 1.5)).is_err());
    }

    proptest! {
        #[test]
        fn adjoint_identity(seed in any::<u64>(), b in 1usize..5, h in 1usize..7, w in 1usize..7) {
            let mut rng = Rng::new(seed);
            let sys = SciSystem::new(Tensor::from_fn(&[b, h, w], |_| rng.uniform())).unwrap();
            let x = Tensor::from_fn(&[b, h, w], |_| rng.normal());
            let y = Tensor::from_fn(&[h, w], |_| rng.normal());
            let lhs = sys.apply_h(&x).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&sys.apply_ht(&y).unwrap()).unwrap();
            let scale = x.norm() * y.norm() * (b as f64);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * scale.max(1e-300));
        }

        #[test]
        fn psi_bounds_and_noiseless_encode(seed in any::<u64>(), b in 1usize..6) {
            let mut rng = Rng::new(seed);
            let sys = SciSystem::new(Tensor::from_fn(&[b, 4, 4], |_| rng.uniform())).unwrap();
            prop_assert!(sys.psi().data().iter().all(|&p| (0.0..=b as f64).contains(&p)));
            let x = Tensor::from_fn(&[b, 4, 4], |_| rng.uniform());
            prop_assert_eq!(sys.encode(&x, 0.0, &mut rng).unwrap(), sys.apply_h(&x).unwrap());
        }
    }
}
