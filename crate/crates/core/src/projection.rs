//! Closed-form x-update of the unfolded solver.
//!
//! Solves `(γ̄₂ I + γ₁ HᵀH) x = Σ_k (λ₂ᵏ + γ₂ᵏ vᵏ) + Hᵀ(γ₁ y − λ₁)` with
//! `γ̄₂ = Σ_k γ₂ᵏ`. Because `H Hᵀ = diag(psi)`, the Woodbury identity gives
//!
//! ```text
//! x = (r − Hᵀ( H r ⊘ (γ̄₂/γ₁ + psi) )) / γ̄₂
//! ```
//!
//! which costs `O(n_x n_y B)` and never forms a matrix. A single-prior
//! projection is the one-term case.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::forward::{BoundSystem, SciSystem};
use crate::tensor::Tensor;

/// Smallest admissible `γ₁`; below it `λ₁/γ₁` is numerically meaningless.
pub const MIN_GAMMA1: f64 = 1e-12;

/// One `(v, λ₂, γ₂)` triple entering the projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTerm {
    pub v: Tensor,
    pub lambda2: Tensor,
    pub gamma2: f64,
}

impl PriorTerm {
    pub fn new(v: Tensor, lambda2: Tensor, gamma2: f64) -> Result<Self> {
        v.expect_same_dims(&lambda2)?;
        check_gamma2(gamma2)?;
        Ok(Self { v, lambda2, gamma2 })
    }
}

/// A [`PriorTerm`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TermVar<'t> {
    pub v: Var<'t>,
    pub lambda2: Var<'t>,
    pub gamma2: Var<'t>,
}

fn check_gamma1(gamma1: f64) -> Result<()> {
    if !(gamma1 >= MIN_GAMMA1) || !gamma1.is_finite() {
        return Err(Error::contract(format!(
            "gamma1 must be at least {MIN_GAMMA1}, got {gamma1}"
        )));
    }
    Ok(())
}

fn check_gamma2(gamma2: f64) -> Result<()> {
    if !(gamma2 > 0.0) || !gamma2.is_finite() {
        return Err(Error::contract(format!(
            "gamma2 must be positive, got {gamma2}"
        )));
    }
    Ok(())
}

/// Single-prior projection.
pub fn project_single(
    term: &PriorTerm,
    y: &Tensor,
    lambda1: &Tensor,
    gamma1: f64,
    system: &SciSystem,
) -> Result<Tensor> {
    project_ensemble(std::slice::from_ref(term), y, lambda1, gamma1, system)
}

/// Ensemble projection over every retained prior term.
pub fn project_ensemble(
    terms: &[PriorTerm],
    y: &Tensor,
    lambda1: &Tensor,
    gamma1: f64,
    system: &SciSystem,
) -> Result<Tensor> {
    if terms.is_empty() {
        return Err(Error::contract("projection needs at least one prior term"));
    }
    let dims = system.cube_dims();
    for t in terms {
        check_gamma2(t.gamma2)?;
        if t.v.dims() != dims || t.lambda2.dims() != dims {
            return Err(Error::shape(format!(
                "prior term dims {:?} do not match system {dims:?}",
                t.v.dims()
            )));
        }
    }
    let tape = Tape::new();
    let bound = system.bind(&tape);
    let vars: Vec<TermVar<'_>> = terms
        .iter()
        .map(|t| TermVar {
            v: tape.constant(t.v.clone()),
            lambda2: tape.constant(t.lambda2.clone()),
            gamma2: tape.constant(Tensor::scalar(t.gamma2)),
        })
        .collect();
    let x = project_on_tape(
        &bound,
        &vars,
        tape.constant(y.clone()),
        tape.constant(lambda1.clone()),
        tape.constant(Tensor::scalar(gamma1)),
    )?;
    let out = (*x.value()).clone();
    Ok(out)
}

/// Differentiable projection; gradients flow into every term, `λ₁` and `γ₁`.
pub fn project_on_tape<'t>(
    system: &BoundSystem<'t>,
    terms: &[TermVar<'t>],
    y: Var<'t>,
    lambda1: Var<'t>,
    gamma1: Var<'t>,
) -> Result<Var<'t>> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::contract("projection needs at least one prior term"))?;
    check_gamma1(gamma1.value().item())?;
    for t in terms {
        check_gamma2(t.gamma2.value().item())?;
    }
    let tape = y.tape();

    let weighted = |t: &TermVar<'t>| -> Result<Var<'t>> { t.lambda2.add(t.v.scale_by(t.gamma2)?) };
    let mut rhs = weighted(first)?;
    let mut gamma2_sum = first.gamma2;
    for t in rest {
        rhs = rhs.add(weighted(t)?)?;
        gamma2_sum = gamma2_sum.add(t.gamma2)?;
    }
    let data = y.scale_by(gamma1)?.sub(lambda1)?;
    let rhs = rhs.add(system.apply_ht(data)?)?;

    let psi = system.psi();
    let ratio = gamma2_sum.div(gamma1)?;
    let denom = ratio.broadcast(&psi.dims())?.add(psi)?;
    let correction = system.apply_ht(system.apply_h(rhs)?.div(denom)?)?;
    let inv = tape.constant(Tensor::scalar(1.0)).div(gamma2_sum)?;
    rhs.sub(correction)?.scale_by(inv)
}

/// Relative normal-equation residual `‖A x − rhs‖ / ‖rhs‖`, evaluated
/// operatively.
pub fn normal_equation_residual(
    x: &Tensor,
    terms: &[PriorTerm],
    y: &Tensor,
    lambda1: &Tensor,
    gamma1: f64,
    system: &SciSystem,
) -> Result<f64> {
    let gamma2: f64 = terms.iter().map(|t| t.gamma2).sum();
    let mut rhs = system.apply_ht(&y.scale(gamma1).sub(lambda1)?)?;
    for t in terms {
        rhs.add_assign(&t.lambda2.add(&t.v.scale(t.gamma2))?)?;
    }
    let ax = x
        .scale(gamma2)
        .add(&system.apply_ht(&system.apply_h(x)?)?.scale(gamma1))?;
    Ok(ax.sub(&rhs)?.norm() / rhs.norm().max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::testutil::dense_projection;

    fn random_cube(dims: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.normal())
    }

    fn random_term(sys: &SciSystem, rng: &mut Rng) -> PriorTerm {
        let d = sys.cube_dims();
        PriorTerm::new(
            random_cube(&d, rng),
            random_cube(&d, rng),
            rng.uniform_range(0.1, 2.0),
        )
        .unwrap()
    }

    fn rel(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().norm() / b.norm().max(1e-300)
    }

    #[test]
    fn zero_masks_reduce_to_prior() {
        let mut rng = Rng::new(1);
        let sys = SciSystem::new(Tensor::zeros(&[2, 3, 3])).unwrap();
        let term = random_term(&sys, &mut rng);
        let y = random_cube(&[3, 3], &mut rng);
        let l1 = random_cube(&[3, 3], &mut rng);
        let x = project_single(&term, &y, &l1, 0.9, &sys).unwrap();
        let want = term.v.add(&term.lambda2.scale(1.0 / term.gamma2)).unwrap();
        assert!(x.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn consistent_v_is_a_fixed_point() {
        let mut rng = Rng::new(2);
        let sys = SciSystem::bernoulli(3, 4, 4, 0.5, &mut rng);
        let v = Tensor::from_fn(&[3, 4, 4], |_| rng.uniform());
        let y = sys.apply_h(&v).unwrap();
        let zero = Tensor::zeros(&[3, 4, 4]);
        let term = PriorTerm::new(v.clone(), zero, 0.4).unwrap();
        let x = project_single(&term, &y, &Tensor::zeros(&[4, 4]), 1.7, &sys).unwrap();
        assert!(x.max_abs_diff(&v).unwrap() < 1e-13);
    }

    #[test]
    fn single_matches_dense_solve() {
        let mut rng = Rng::new(3);
        let sys = SciSystem::new(Tensor::from_fn(&[2, 3, 3], |_| rng.uniform())).unwrap();
        let mut term = random_term(&sys, &mut rng);
        term.gamma2 = 1.3;
        let y = random_cube(&[3, 3], &mut rng);
        let l1 = random_cube(&[3, 3], &mut rng);
        let x = project_single(&term, &y, &l1, 0.7, &sys).unwrap();
        let (want, _, _) = dense_projection(&sys, &[(&term.v, &term.lambda2, 1.3)], &y, &l1, 0.7);
        assert!(rel(&x, &want) < 1e-8);
        let r = normal_equation_residual(&x, &[term], &y, &l1, 0.7, &sys).unwrap();
        assert!(r < 1e-8, "residual {r}");
    }

    #[test]
    fn ensemble_matches_dense_solve() {
        let mut rng = Rng::new(4);
        let sys = SciSystem::new(Tensor::from_fn(&[2, 3, 3], |_| rng.uniform())).unwrap();
        let terms: Vec<_> = (0..3).map(|_| random_term(&sys, &mut rng)).collect();
        let y = random_cube(&[3, 3], &mut rng);
        let l1 = random_cube(&[3, 3], &mut rng);
        let x = project_ensemble(&terms, &y, &l1, 0.5, &sys).unwrap();
        let refs: Vec<_> = terms.iter().map(|t| (&t.v, &t.lambda2, t.gamma2)).collect();
        let (want, _, _) = dense_projection(&sys, &refs, &y, &l1, 0.5);
        assert!(rel(&x, &want) < 1e-8);
    }

    #[test]
    fn ensemble_degenerate_cases() {
        let mut rng = Rng::new(5);
        let sys = SciSystem::bernoulli(4, 6, 6, 0.5, &mut rng);
        let term = random_term(&sys, &mut rng);
        let y = random_cube(&[6, 6], &mut rng);
        let l1 = random_cube(&[6, 6], &mut rng);

        let single = project_single(&term, &y, &l1, 1.1, &sys).unwrap();
        let one = project_ensemble(std::slice::from_ref(&term), &y, &l1, 1.1, &sys).unwrap();
        assert_eq!(single, one);

        let doubled = PriorTerm::new(term.v.clone(), term.lambda2.scale(2.0), 2.0 * term.gamma2).unwrap();
        let pair = project_ensemble(&[term.clone(), term.clone()], &y, &l1, 1.1, &sys).unwrap();
        let want = project_single(&doubled, &y, &l1, 1.1, &sys).unwrap();
        assert!(rel(&pair, &want) < 1e-12);
    }

    #[test]
    fn ensemble_is_order_independent() {
        let mut rng = Rng::new(6);
        let sys = SciSystem::bernoulli(4, 8, 8, 0.5, &mut rng);
        let mut terms: Vec<_> = (0..4).map(|_| random_term(&sys, &mut rng)).collect();
        let y = random_cube(&[8, 8], &mut rng);
        let l1 = random_cube(&[8, 8], &mut rng);
        let a = project_ensemble(&terms, &y, &l1, 0.8, &sys).unwrap();
        terms.reverse();
        terms.swap(0, 2);
        let b = project_ensemble(&terms, &y, &l1, 0.8, &sys).unwrap();
        assert!(rel(&a, &b) < 1e-12);
    }

    #[test]
    fn guards() {
        let mut rng = Rng::new(7);
        let sys = SciSystem::bernoulli(2, 3, 3, 0.5, &mut rng);
        let term = random_term(&sys, &mut rng);
        let y = Tensor::zeros(&[3, 3]);
        assert!(matches!(
            project_single(&term, &y, &y, 0.0, &sys),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            project_single(&term, &y, &y, 1e-13, &sys),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            project_ensemble(&[], &y, &y, 1.0, &sys),
            Err(Error::Contract(_))
        ));
        assert!(PriorTerm::new(term.v.clone(), term.lambda2.clone(), -1.0).is_err());
        let mut bad = term.clone();
        bad.gamma2 = 0.0;
        assert!(project_single(&bad, &y, &y, 1.0, &sys).is_err());
    }

    #[test]
    fn residual_stays_small_up_to_8x8x4() {
        let mut rng = Rng::new(8);
        for _ in 0..40 {
            let b = 1 + rng.below(4);
            let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
            let sys = SciSystem::new(Tensor::from_fn(&[b, h, w], |_| rng.uniform())).unwrap();
            let k = 1 + rng.below(4);
            let terms: Vec<_> = (0..k).map(|_| random_term(&sys, &mut rng)).collect();
            let y = random_cube(&[h, w], &mut rng);
            let l1 = random_cube(&[h, w], &mut rng);
            let g1 = rng.uniform_range(0.05, 5.0);
            let x = project_ensemble(&terms, &y, &l1, g1, &sys).unwrap();
            let r = normal_equation_residual(&x, &terms, &y, &l1, g1, &sys).unwrap();
            assert!(r < 1e-8, "residual {r}");
        }
    }
}
