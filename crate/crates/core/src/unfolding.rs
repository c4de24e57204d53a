//! The unfolded solver and the GAP-TV baseline.
//!
//! Every stage performs the same four steps: denoise `u = x − λ₂/γ₂`, update
//! `λ₂`, update `λ₁`, project. During the first `m` stages the projection uses
//! the newest prior term only. During the following `n` stages it gathers
//! every term produced since stage `m` (the ensemble buffer), so stage
//! `m + j` projects over `j + 1` terms.
//!
//! The loop is written once against the autodiff [`Tape`]. Inference records
//! constants only; training records parameters and back-propagates through
//! every projection and prior.

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::forward::{BoundSystem, SciSystem};
use crate::priors::{denoise_tv, CnnConfig, CnnPrior, FeatureLedger, LedgerVar};
use crate::projection::{project_on_tape, PriorTerm, TermVar};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use crate::training::temporal_index;

/// Stage counts and per-stage penalty parameters.
///
/// `log_gamma1[i]`, `log_gamma2[i]` belong to stage `i` for `i = 0..=m+n`;
/// stage 0 is the initial projection.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    pub single: usize,
    pub ensemble: usize,
    pub log_gamma1: Vec<f64>,
    pub log_gamma2: Vec<f64>,
}

impl StageSchedule {
    /// Constant penalties across all stages.
    pub fn constant(single: usize, ensemble: usize, gamma1: f64, gamma2: f64) -> Result<Self> {
        if !(gamma1 > 0.0 && gamma2 > 0.0) {
            return Err(Error::contract(format!(
                "penalties must be positive, got gamma1={gamma1} gamma2={gamma2}"
            )));
        }
        let len = single + ensemble + 1;
        Ok(Self {
            single,
            ensemble,
            log_gamma1: vec![gamma1.ln(); len],
            log_gamma2: vec![gamma2.ln(); len],
        })
    }

    pub fn stages(&self) -> usize {
        self.single + self.ensemble
    }

    pub fn gamma1(&self, stage: usize) -> f64 {
        self.log_gamma1[stage].exp()
    }

    pub fn gamma2(&self, stage: usize) -> f64 {
        self.log_gamma2[stage].exp()
    }

    /// Number of prior terms entering the projection of `stage`.
    pub fn terms_at(&self, stage: usize) -> usize {
        if stage <= self.single {
            1
        } else {
            stage - self.single + 1
        }
    }

    fn validate(&self) -> Result<()> {
        let len = self.stages() + 1;
        if self.log_gamma1.len() != len || self.log_gamma2.len() != len {
            return Err(Error::shape(format!(
                "schedule with {} stages needs {len} penalties, got {} / {}",
                self.stages(),
                self.log_gamma1.len(),
                self.log_gamma2.len()
            )));
        }
        if self.log_gamma1.iter().chain(&self.log_gamma2).any(|g| !g.is_finite()) {
            return Err(Error::contract("log-penalties must be finite"));
        }
        Ok(())
    }
}

/// TV realization of the prior. Inside the unfolded loop the denoiser weight
/// is `weight / γ₂` of the stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvPrior {
    pub weight: f64,
    pub iters: usize,
}

/// The denoiser used at every stage.
#[derive(Clone, Copy, Debug)]
pub enum StagePrior<'a> {
    /// `v = u`
    Identity,
    Tv(TvPrior),
    /// One prior per stage, the first with the first-prior topology.
    Cnn(&'a [CnnPrior]),
}

/// Counters recorded while unfolding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnfoldTrace {
    pub single_projections: usize,
    pub ensemble_projections: usize,
    pub denoiser_calls: usize,
    /// Stage indices held by the ensemble buffer after each ensemble stage.
    pub buffer_stages: Vec<Vec<usize>>,
}

/// Solver state after the last stage.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub x: Tensor,
    pub lambda1: Tensor,
    pub lambda2: Tensor,
    /// `(stage, term)` pairs retained from stage `m` onward.
    pub ensemble_buffer: Vec<(usize, PriorTerm)>,
    pub ledger: Option<FeatureLedger>,
}

#[derive(Clone, Debug)]
pub struct ElpRun {
    /// Final `x` clamped to `[0, ∞)`.
    pub output: Tensor,
    pub state: SolverState,
    pub trace: UnfoldTrace,
}

impl ElpRun {
    /// Output clamped to `[0, 1]` for scoring.
    pub fn for_metrics(&self) -> Tensor {
        self.state.x.clamp(0.0, 1.0)
    }
}

/// `λ₁ − γ₁ (y − H x_prev)`
pub fn update_lambda1(
    lambda1_prev: &Tensor,
    gamma1: f64,
    y: &Tensor,
    x_prev: &Tensor,
    system: &SciSystem,
) -> Result<Tensor> {
    if !(gamma1 > 0.0) {
        return Err(Error::contract(format!("gamma1 must be positive, got {gamma1}")));
    }
    let residual = y.sub(&system.apply_h(x_prev)?)?;
    lambda1_prev.sub(&residual.scale(gamma1))
}

/// `λ₂ − γ₂ (x − v)`
pub fn update_lambda2(lambda2_prev: &Tensor, gamma2: f64, x: &Tensor, v: &Tensor) -> Result<Tensor> {
    if !(gamma2 > 0.0) {
        return Err(Error::contract(format!("gamma2 must be positive, got {gamma2}")));
    }
    lambda2_prev.sub(&x.sub(v)?.scale(gamma2))
}

/// `Ȳ` replicated over `B` frames: the zero-iteration estimate.
pub fn replicated_baseline(y: &Tensor, system: &SciSystem) -> Result<Tensor> {
    tensor::frame_repeat(&system.normalized_measurement(y)?, system.frames())
}

/// Runs the unfolded solver with fixed penalties and the given prior.
pub fn run_elp(
    y: &Tensor,
    system: &SciSystem,
    schedule: &StageSchedule,
    prior: StagePrior<'_>,
) -> Result<ElpRun> {
    schedule.validate()?;
    let tape = Tape::new();
    let scalar = |v: f64| tape.constant(Tensor::scalar(v));
    let gamma1: Vec<Var<'_>> = (0..=schedule.stages()).map(|i| scalar(schedule.gamma1(i))).collect();
    let gamma2: Vec<Var<'_>> = (0..=schedule.stages()).map(|i| scalar(schedule.gamma2(i))).collect();
    let bound = system.bind(&tape);
    let y_var = tape.constant(y.clone());
    let mut trace = UnfoldTrace::default();

    let state = match prior {
        StagePrior::Identity => {
            let ctx = Unfold::new(&bound, y_var, schedule, &gamma1, &gamma2)?;
            ctx.run(&mut |_, u, _| Ok(u), &mut trace)?
        }
        StagePrior::Tv(tv) => {
            let ctx = Unfold::new(&bound, y_var, schedule, &gamma1, &gamma2)?;
            ctx.run(&mut |_, u, g2| tv_step(tv, u, g2), &mut trace)?
        }
        StagePrior::Cnn(priors) => {
            let y_norm = system.normalized_measurement(y)?;
            let bound_priors: Vec<Vec<Var<'_>>> = priors.iter().map(|p| p.bind_constant(&tape)).collect();
            let mut den = CnnDenoiser::new(&tape, priors, &bound_priors, &y_norm, system, schedule)?;
            let ctx = Unfold::new(&bound, y_var, schedule, &gamma1, &gamma2)?;
            let mut state = ctx.run(&mut |i, u, g2| den.denoise(i, u, g2), &mut trace)?;
            state.ledger = den.ledger.as_ref().map(LedgerVar::values);
            state
        }
    };
    Ok(ElpRun {
        output: state.x.clamp(0.0, f64::INFINITY),
        state,
        trace,
    })
}

// Recorded as an opaque op: gradients cannot pass through the TV solver.
fn tv_step<'t>(tv: TvPrior, u: Var<'t>, gamma2: Var<'t>) -> Result<Var<'t>> {
    let weight = tv.weight / gamma2.value().item();
    let v = denoise_tv(&u.value(), weight, tv.iters)?;
    Ok(u.tape().opaque("denoise_tv", v, &[u, gamma2]))
}

pub(crate) type Denoise<'a, 't> = dyn FnMut(usize, Var<'t>, Var<'t>) -> Result<Var<'t>> + 'a;

/// Algorithm state on a tape.
pub(crate) struct Unfold<'s, 't> {
    system: &'s BoundSystem<'t>,
    y: Var<'t>,
    single: usize,
    ensemble: usize,
    gamma1: &'s [Var<'t>],
    gamma2: &'s [Var<'t>],
}

pub(crate) struct TapeState<'t> {
    pub x: Var<'t>,
    pub lambda1: Var<'t>,
    pub lambda2: Var<'t>,
    pub buffer: Vec<(usize, TermVar<'t>)>,
}

impl<'s, 't> Unfold<'s, 't> {
    pub(crate) fn new(
        system: &'s BoundSystem<'t>,
        y: Var<'t>,
        schedule: &StageSchedule,
        gamma1: &'s [Var<'t>],
        gamma2: &'s [Var<'t>],
    ) -> Result<Self> {
        Self::with_counts(system, y, schedule.single, schedule.ensemble, gamma1, gamma2)
    }

    pub(crate) fn with_counts(
        system: &'s BoundSystem<'t>,
        y: Var<'t>,
        single: usize,
        ensemble: usize,
        gamma1: &'s [Var<'t>],
        gamma2: &'s [Var<'t>],
    ) -> Result<Self> {
        let len = single + ensemble + 1;
        if gamma1.len() != len || gamma2.len() != len {
            return Err(Error::shape(format!("expected {len} penalties per kind")));
        }
        let masks_plane = system.psi().dims();
        if y.dims() != masks_plane {
            return Err(Error::shape(format!(
                "measurement {:?} does not match mask plane {masks_plane:?}",
                y.dims()
            )));
        }
        Ok(Self {
            system,
            y,
            single,
            ensemble,
            gamma1,
            gamma2,
        })
    }

    pub(crate) fn run_on_tape(
        &self,
        denoise: &mut Denoise<'_, 't>,
        trace: &mut UnfoldTrace,
    ) -> Result<TapeState<'t>> {
        let tape = self.y.tape();
        let plane = self.y.dims();
        let cube_dims = [self.system.frames(), plane[0], plane[1]];
        let zero_cube = tape.constant(Tensor::zeros(&cube_dims));
        let zero_plane = tape.constant(Tensor::zeros(&plane));
        let one = tape.constant(Tensor::scalar(1.0));

        let initial = TermVar {
            v: zero_cube,
            lambda2: zero_cube,
            gamma2: self.gamma2[0],
        };
        let mut x = project_on_tape(self.system, &[initial], self.y, zero_plane, self.gamma1[0])?;
        let mut lambda1 = zero_plane;
        let mut lambda2 = zero_cube;
        let mut buffer: Vec<(usize, TermVar<'t>)> = Vec::new();
        if self.single == 0 && self.ensemble > 0 {
            buffer.push((0, initial));
        }

        for i in 1..=self.single + self.ensemble {
            let (g1, g2) = (self.gamma1[i], self.gamma2[i]);
            let u = x.sub(lambda2.scale_by(one.div(g2)?)?)?;
            let v = denoise(i, u, g2)?;
            trace.denoiser_calls += 1;
            if v.dims() != cube_dims {
                return Err(Error::shape(format!(
                    "denoiser returned {:?}, expected {cube_dims:?}",
                    v.dims()
                )));
            }
            lambda2 = lambda2.sub(x.sub(v)?.scale_by(g2)?)?;
            let residual = self.y.sub(self.system.apply_h(x)?)?;
            lambda1 = lambda1.sub(residual.scale_by(g1)?)?;
            let term = TermVar { v, lambda2, gamma2: g2 };
            if i <= self.single {
                x = project_on_tape(self.system, &[term], self.y, lambda1, g1)?;
                trace.single_projections += 1;
                if i == self.single && self.ensemble > 0 {
                    buffer.push((i, term));
                }
            } else {
                buffer.push((i, term));
                let terms: Vec<TermVar<'t>> = buffer.iter().map(|(_, t)| *t).collect();
                x = project_on_tape(self.system, &terms, self.y, lambda1, g1)?;
                trace.ensemble_projections += 1;
                trace.buffer_stages.push(buffer.iter().map(|(s, _)| *s).collect());
            }
        }
        Ok(TapeState {
            x,
            lambda1,
            lambda2,
            buffer,
        })
    }

    fn run(&self, denoise: &mut Denoise<'_, 't>, trace: &mut UnfoldTrace) -> Result<SolverState> {
        let s = self.run_on_tape(denoise, trace)?;
        let value = |v: Var<'t>| (*v.value()).clone();
        Ok(SolverState {
            x: value(s.x),
            lambda1: value(s.lambda1),
            lambda2: value(s.lambda2),
            ensemble_buffer: s
                .buffer
                .iter()
                .map(|&(stage, t)| {
                    (
                        stage,
                        PriorTerm {
                            v: value(t.v),
                            lambda2: value(t.lambda2),
                            gamma2: t.gamma2.value().item(),
                        },
                    )
                })
                .collect(),
            ledger: None,
        })
    }
}

/// Stage denoiser backed by one [`CnnPrior`] per stage.
///
/// A measurement with fewer frames than the priors were built for is
/// temporally rearranged on the way in and truncated on the way out.
pub(crate) struct CnnDenoiser<'s, 't> {
    priors: &'s [CnnPrior],
    bound: &'s [Vec<Var<'t>>],
    y_norm: Var<'t>,
    gather: Option<(Vec<usize>, Vec<usize>)>,
    pub(crate) ledger: Option<LedgerVar<'t>>,
}

impl<'s, 't> CnnDenoiser<'s, 't> {
    pub(crate) fn new(
        tape: &'t Tape,
        priors: &'s [CnnPrior],
        bound: &'s [Vec<Var<'t>>],
        y_norm: &Tensor,
        system: &SciSystem,
        schedule: &StageSchedule,
    ) -> Result<Self> {
        check_priors(priors, schedule.stages())?;
        let frames = priors[0].config().frames;
        let actual = system.frames();
        let gather = if actual == frames {
            None
        } else {
            Some((temporal_index(actual, frames)?, (0..actual).collect()))
        };
        let plane = y_norm.dims();
        Ok(Self {
            priors,
            bound,
            y_norm: tape.constant(y_norm.clone().reshape(&[1, plane[0], plane[1]])?),
            gather,
            ledger: None,
        })
    }

    pub(crate) fn denoise(&mut self, stage: usize, u: Var<'t>, gamma2: Var<'t>) -> Result<Var<'t>> {
        let prior = &self.priors[stage - 1];
        let full = match &self.gather {
            Some((expand, _)) => u.gather_frames(expand)?,
            None => u,
        };
        let noise = gamma2.broadcast(&self.y_norm.dims())?;
        let input = full.concat(noise)?.concat(self.y_norm)?;
        let (v, ledger) = prior.forward(&self.bound[stage - 1], input, full, self.ledger.as_ref())?;
        self.ledger = Some(ledger);
        match &self.gather {
            Some((_, keep)) => v.gather_frames(keep),
            None => Ok(v),
        }
    }
}

fn check_priors(priors: &[CnnPrior], stages: usize) -> Result<()> {
    if priors.len() != stages {
        return Err(Error::shape(format!(
            "schedule has {stages} stages but {} priors were given",
            priors.len()
        )));
    }
    for (i, p) in priors.iter().enumerate() {
        if p.is_dense() != (i > 0) {
            return Err(Error::shape(format!(
                "prior {} has the wrong topology for its position",
                i + 1
            )));
        }
        if p.config() != priors[0].config() {
            return Err(Error::shape("all priors of a run must share one configuration"));
        }
    }
    Ok(())
}

/// Trainable unfolded network: per-stage log-penalties and CNN priors.
#[derive(Clone, Debug, PartialEq)]
pub struct ElpModel {
    config: CnnConfig,
    single: usize,
    ensemble: usize,
    pub(crate) log_gamma1: Vec<Parameter>,
    pub(crate) log_gamma2: Vec<Parameter>,
    pub(crate) priors: Vec<CnnPrior>,
}

/// Initial penalties of a freshly built model.
pub const INIT_GAMMA1: f64 = 1.0;
pub const INIT_GAMMA2: f64 = 0.1;

impl ElpModel {
    pub fn new(config: CnnConfig, single: usize, ensemble: usize, rng: &mut Rng) -> Result<Self> {
        let stages = single + ensemble;
        if stages == 0 {
            return Err(Error::contract("a model needs at least one stage"));
        }
        let priors = (1..=stages)
            .map(|i| CnnPrior::new(config.clone(), i > 1, &format!("stage{i}"), rng))
            .collect::<Result<Vec<_>>>()?;
        let (log_gamma1, log_gamma2) = Self::penalties(stages, INIT_GAMMA1, INIT_GAMMA2);
        Ok(Self {
            config,
            single,
            ensemble,
            log_gamma1,
            log_gamma2,
            priors,
        })
    }

    /// Model with every prior weight zero and the initial penalties.
    pub fn zeroed(config: CnnConfig, single: usize, ensemble: usize) -> Result<Self> {
        let stages = single + ensemble;
        if stages == 0 {
            return Err(Error::contract("a model needs at least one stage"));
        }
        let priors = (1..=stages)
            .map(|i| CnnPrior::zeroed(config.clone(), i > 1, &format!("stage{i}")))
            .collect::<Result<Vec<_>>>()?;
        let (log_gamma1, log_gamma2) = Self::penalties(stages, INIT_GAMMA1, INIT_GAMMA2);
        Ok(Self {
            config,
            single,
            ensemble,
            log_gamma1,
            log_gamma2,
            priors,
        })
    }

    fn penalties(stages: usize, g1: f64, g2: f64) -> (Vec<Parameter>, Vec<Parameter>) {
        let make = |kind: &str, g: f64| -> Vec<Parameter> {
            (0..=stages)
                .map(|i| Parameter::new(format!("stage{i}.log_{kind}"), Tensor::scalar(g.ln())))
                .collect()
        };
        (make("gamma1", g1), make("gamma2", g2))
    }

    /// Extends a trained model with `ensemble` additional stages.
    ///
    /// The first `single` stages are copied. Every added stage starts from the
    /// last copied stage's prior weights and penalties, with its `γ₂` divided
    /// by the number of terms its ensemble projection sums.
    pub fn extend_from(base: &ElpModel, single: usize, ensemble: usize, rng: &mut Rng) -> Result<Self> {
        if single == 0 || single > base.stages() {
            return Err(Error::contract(format!(
                "cannot take {single} stages from a {}-stage model",
                base.stages()
            )));
        }
        let mut model = Self::new(base.config.clone(), single, ensemble, rng)?;
        for i in 0..=model.stages() {
            let src = i.min(single);
            model.log_gamma1[i].value = base.log_gamma1[src].value.clone();
            model.log_gamma2[i].value = base.log_gamma2[src].value.clone();
        }
        let sched = model.schedule();
        for i in single + 1..=model.stages() {
            let t = sched.terms_at(i) as f64;
            model.log_gamma2[i].value = Tensor::scalar(model.log_gamma2[i].value.item() - t.ln());
        }
        for i in 1..=model.stages() {
            let src = &base.priors[i.min(single) - 1];
            let dst = &mut model.priors[i - 1];
            if src.is_dense() == dst.is_dense() {
                dst.copy_weights_from(src)?;
            } else {
                // only reachable when single == 1: the added stages need the dense
                // topology but the sole trained prior is a first prior
                return Err(Error::contract(
                    "extending a one-stage model needs at least two trained stages",
                ));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn single(&self) -> usize {
        self.single
    }

    pub fn ensemble(&self) -> usize {
        self.ensemble
    }

    pub fn stages(&self) -> usize {
        self.single + self.ensemble
    }

    pub fn priors(&self) -> &[CnnPrior] {
        &self.priors
    }

    pub fn schedule(&self) -> StageSchedule {
        let read = |ps: &[Parameter]| ps.iter().map(|p| p.value.item()).collect();
        StageSchedule {
            single: self.single,
            ensemble: self.ensemble,
            log_gamma1: read(&self.log_gamma1),
            log_gamma2: read(&self.log_gamma2),
        }
    }

    /// Every parameter in a fixed order: penalties, then priors stage by stage.
    pub fn params(&self) -> Vec<&Parameter> {
        self.log_gamma1
            .iter()
            .chain(&self.log_gamma2)
            .chain(self.priors.iter().flat_map(|p| p.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.log_gamma1
            .iter_mut()
            .chain(self.log_gamma2.iter_mut())
            .chain(self.priors.iter_mut().flat_map(|p| p.params_mut().iter_mut()))
            .collect()
    }

    pub fn num_weights(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Reconstructs one measurement with the current weights.
    pub fn reconstruct(&self, y: &Tensor, system: &SciSystem) -> Result<ElpRun> {
        self.reconstruct_stages(y, system, self.stages())
    }

    /// Like [`ElpModel::reconstruct`] but stops after `stages` stages; stages
    /// past `m` keep their ensemble role.
    pub fn reconstruct_stages(&self, y: &Tensor, system: &SciSystem, stages: usize) -> Result<ElpRun> {
        if stages > self.stages() {
            return Err(Error::contract(format!(
                "model has {} stages, {stages} requested",
                self.stages()
            )));
        }
        self.check_system(system)?;
        let mut schedule = self.schedule();
        schedule.single = self.single.min(stages);
        schedule.ensemble = stages - schedule.single;
        schedule.log_gamma1.truncate(stages + 1);
        schedule.log_gamma2.truncate(stages + 1);
        run_elp(y, system, &schedule, StagePrior::Cnn(&self.priors[..stages]))
    }

    pub(crate) fn check_system(&self, system: &SciSystem) -> Result<()> {
        if system.frames() > self.config.frames {
            return Err(Error::shape(format!(
                "measurement has {} frames, model supports at most {}",
                system.frames(),
                self.config.frames
            )));
        }
        Ok(())
    }

    /// Records the full forward pass on `tape` with every parameter as a
    /// differentiable leaf. Returns the final `x` and the parameter vars in
    /// [`ElpModel::params`] order.
    pub fn forward_on_tape<'t>(
        &self,
        tape: &'t Tape,
        y: &Tensor,
        system: &SciSystem,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        self.check_system(system)?;
        let log_g1: Vec<Var<'t>> = self.log_gamma1.iter().map(|p| tape.param(p)).collect();
        let log_g2: Vec<Var<'t>> = self.log_gamma2.iter().map(|p| tape.param(p)).collect();
        let gamma1: Vec<Var<'t>> = log_g1.iter().map(|v| v.exp()).collect();
        let gamma2: Vec<Var<'t>> = log_g2.iter().map(|v| v.exp()).collect();
        let bound_priors: Vec<Vec<Var<'t>>> = self.priors.iter().map(|p| p.bind(tape)).collect();
        let y_norm = system.normalized_measurement(y)?;
        let schedule = self.schedule();
        let mut den = CnnDenoiser::new(tape, &self.priors, &bound_priors, &y_norm, system, &schedule)?;
        let bound = system.bind(tape);
        let y_var = tape.constant(y.clone());
        let ctx = Unfold::with_counts(&bound, y_var, self.single, self.ensemble, &gamma1, &gamma2)?;
        let mut trace = UnfoldTrace::default();
        let state = ctx.run_on_tape(&mut |i, u, g2| den.denoise(i, u, g2), &mut trace)?;
        let mut vars = log_g1;
        vars.extend(log_g2);
        vars.extend(bound_priors.into_iter().flatten());
        Ok((state.x, vars))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapTvConfig {
    pub iters: usize,
    pub tv_weight: f64,
    pub tv_iters: usize,
}

impl Default for GapTvConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            tv_weight: 0.03,
            tv_iters: 20,
        }
    }
}

/// GAP data-consistency step `v + Hᵀ((y − H v) ⊘ psi)`.
pub fn gap_projection(v: &Tensor, y: &Tensor, system: &SciSystem) -> Result<Tensor> {
    let residual = y.sub(&system.apply_h(v)?)?.div(system.psi())?;
    v.add(&system.apply_ht(&residual)?)
}

/// GAP with a TV denoiser, started from `Ȳ` replicated over frames. The
/// result is clamped to `[0, 1]`.
pub fn run_gap_tv(y: &Tensor, system: &SciSystem, cfg: &GapTvConfig) -> Result<Tensor> {
    let mut v = replicated_baseline(y, system)?;
    system.check_exposure(system.psi())?;
    for _ in 0..cfg.iters {
        let x = gap_projection(&v, y, system)?;
        v = denoise_tv(&x, cfg.tv_weight, cfg.tv_iters)?;
    }
    Ok(v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr_cube;
    use crate::projection::project_single;
    use crate::training::{synth_scene, SceneKind};

    fn random_system(b: usize, h: usize, w: usize, seed: u64) -> (SciSystem, Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let sys = SciSystem::bernoulli(b, h, w, 0.5, &mut rng);
        let scene = Tensor::from_fn(&[b, h, w], |_| rng.uniform());
        let y = sys.apply_h(&scene).unwrap();
        (sys, scene, y)
    }

    fn ones_system(h: usize, w: usize) -> SciSystem {
        SciSystem::new(Tensor::filled(&[1, h, w], 1.0)).unwrap()
    }

    #[test]
    fn lambda1_examples() {
        let (sys, scene, y) = random_system(2, 3, 3, 1);
        let l = Tensor::from_fn(&[3, 3], |i| i as f64);
        assert_eq!(update_lambda1(&l, 0.7, &y, &scene, &sys).unwrap(), l);
        assert!(update_lambda1(&l, 0.0, &y, &scene, &sys).is_err());

        let sys = ones_system(2, 2);
        let x = Tensor::zeros(&[1, 2, 2]);
        let y = Tensor::filled(&[2, 2], 0.5);
        let out = update_lambda1(&Tensor::zeros(&[2, 2]), 2.0, &y, &x, &sys).unwrap();
        assert!(out.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn lambda2_examples() {
        let mut rng = Rng::new(2);
        let x = Tensor::from_fn(&[2, 3, 3], |_| rng.normal());
        let l = Tensor::from_fn(&[2, 3, 3], |_| rng.normal());
        assert_eq!(update_lambda2(&l, 0.4, &x, &x).unwrap(), l);
        let ones = Tensor::filled(&[2, 3, 3], 1.0);
        let zero = Tensor::zeros(&[2, 3, 3]);
        let out = update_lambda2(&zero, 1.0, &ones, &zero).unwrap();
        assert!(out.data().iter().all(|&v| v == -1.0));
        assert!(matches!(
            update_lambda2(&zero, 1.0, &ones, &Tensor::zeros(&[2, 3, 2])),
            Err(Error::Shape(_))
        ));

        let v = Tensor::from_fn(&[2, 3, 3], |_| rng.normal());
        let out = update_lambda2(&l, 0.3, &x, &v).unwrap();
        for i in 0..out.len() {
            let expect = l.data()[i] - 0.3 * (x.data()[i] - v.data()[i]);
            assert!((out.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn output_dims_for_every_schedule() {
        let (sys, _, y) = random_system(3, 8, 8, 3);
        for (m, n) in [(0, 0), (0, 2), (1, 0), (2, 3)] {
            let sched = StageSchedule::constant(m, n, 1.0, 0.1).unwrap();
            let run = run_elp(&y, &sys, &sched, StagePrior::Identity).unwrap();
            assert_eq!(run.output.dims(), &[3, 8, 8]);
        }
    }

    #[test]
    fn identity_denoiser_recovers_invertible_system() {
        let sys = ones_system(16, 16);
        let mut rng = Rng::new(4);
        let scene = Tensor::from_fn(&[1, 16, 16], |_| rng.uniform());
        let y = sys.apply_h(&scene).unwrap();
        let sched = StageSchedule::constant(30, 0, 1.0, 0.1).unwrap();
        let run = run_elp(&y, &sys, &sched, StagePrior::Identity).unwrap();
        assert!(psnr_cube(&run.for_metrics(), &scene).unwrap() >= 60.0);
    }

    #[test]
    fn tv_prior_beats_replicated_baseline() {
        let mut rng = Rng::new(5);
        let scene = synth_scene(SceneKind::MovingSquare, 32, 32, 4, (1, 0), &mut rng).frames;
        let sys = SciSystem::bernoulli(4, 32, 32, 0.5, &mut rng);
        let y = sys.apply_h(&scene).unwrap();
        let sched = StageSchedule::constant(3, 2, 1.0, 0.1).unwrap();
        let tv = TvPrior {
            weight: 0.02,
            iters: 20,
        };
        let run = run_elp(&y, &sys, &sched, StagePrior::Tv(tv)).unwrap();
        let base = replicated_baseline(&y, &sys).unwrap();
        let elp = psnr_cube(&run.for_metrics(), &scene).unwrap();
        let zero = psnr_cube(&base.clamp(0.0, 1.0), &scene).unwrap();
        assert!(elp > zero, "{elp} <= {zero}");
    }

    #[test]
    fn no_ensemble_stages_is_plain_admm() {
        let (sys, _, y) = random_system(3, 6, 6, 6);
        let m = 4;
        let sched = StageSchedule::constant(m, 0, 0.8, 0.3).unwrap();
        let tv = TvPrior {
            weight: 0.02,
            iters: 10,
        };
        let run = run_elp(&y, &sys, &sched, StagePrior::Tv(tv)).unwrap();
        assert_eq!(run.trace.ensemble_projections, 0);
        assert_eq!(run.trace.single_projections, m);
        assert!(run.state.ensemble_buffer.is_empty());

        let (g1, g2) = (0.8, 0.3);
        let zero = Tensor::zeros(&[3, 6, 6]);
        let mut l1 = Tensor::zeros(&[6, 6]);
        let mut l2 = zero.clone();
        let mut x = project_single(&PriorTerm::new(zero.clone(), zero, g2).unwrap(), &y, &l1, g1, &sys).unwrap();
        for _ in 0..m {
            let u = x.sub(&l2.scale(1.0 / g2)).unwrap();
            let v = denoise_tv(&u, tv.weight / g2, tv.iters).unwrap();
            l2 = update_lambda2(&l2, g2, &x, &v).unwrap();
            l1 = update_lambda1(&l1, g1, &y, &x, &sys).unwrap();
            x = project_single(&PriorTerm::new(v, l2.clone(), g2).unwrap(), &y, &l1, g1, &sys).unwrap();
        }
        assert!(run.state.x.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn ensemble_buffer_accounting() {
        let (sys, _, y) = random_system(2, 4, 4, 7);
        let sched = StageSchedule::constant(8, 5, 1.0, 0.2).unwrap();
        let run = run_elp(&y, &sys, &sched, StagePrior::Identity).unwrap();
        assert_eq!(run.trace.single_projections, 8);
        assert_eq!(run.trace.ensemble_projections, 5);
        for (j, stages) in run.trace.buffer_stages.iter().enumerate() {
            let expect: Vec<usize> = (8..=9 + j).collect();
            assert_eq!(stages, &expect);
            assert_eq!(stages.len(), sched.terms_at(9 + j));
        }
        assert_eq!(sched.terms_at(9), 2);
        assert_eq!(sched.terms_at(13), 6);

        let sched = StageSchedule::constant(0, 2, 1.0, 0.2).unwrap();
        let run = run_elp(&y, &sys, &sched, StagePrior::Identity).unwrap();
        assert_eq!(run.trace.buffer_stages, vec![vec![0, 1], vec![0, 1, 2]]);
    }

    #[test]
    fn frozen_buffer_terms_keep_their_multipliers() {
        let (sys, _, y) = random_system(2, 4, 4, 8);
        let sched = StageSchedule::constant(2, 3, 1.0, 0.2).unwrap();
        let tv = TvPrior {
            weight: 0.02,
            iters: 5,
        };
        let full = run_elp(&y, &sys, &sched, StagePrior::Tv(tv)).unwrap();
        let short_sched = StageSchedule::constant(2, 1, 1.0, 0.2).unwrap();
        let short = run_elp(&y, &sys, &short_sched, StagePrior::Tv(tv)).unwrap();
        for k in 0..2 {
            assert_eq!(full.state.ensemble_buffer[k], short.state.ensemble_buffer[k]);
        }
    }

    #[test]
    fn gap_tv_initialization_and_consistency() {
        let (sys, _, y) = random_system(3, 8, 8, 9);
        let cfg = GapTvConfig {
            iters: 0,
            ..Default::default()
        };
        let base = replicated_baseline(&y, &sys).unwrap();
        assert_eq!(run_gap_tv(&y, &sys, &cfg).unwrap(), base.clamp(0.0, 1.0));

        let mut rng = Rng::new(10);
        for _ in 0..5 {
            let v = Tensor::from_fn(&[3, 8, 8], |_| rng.normal());
            let x = gap_projection(&v, &y, &sys).unwrap();
            assert!(sys.apply_h(&x).unwrap().max_abs_diff(&y).unwrap() < 1e-10);
        }
    }

    #[test]
    fn gap_tv_recovers_invertible_system() {
        let sys = ones_system(16, 16);
        let mut rng = Rng::new(11);
        let scene = synth_scene(SceneKind::MovingGradient, 16, 16, 1, (0, 0), &mut rng).frames;
        let y = sys.apply_h(&scene).unwrap();
        // without compression the fixed point is TV(y), so the weight bounds the bias
        let cfg = GapTvConfig {
            iters: 50,
            tv_weight: 0.005,
            tv_iters: 20,
        };
        let out = run_gap_tv(&y, &sys, &cfg).unwrap();
        assert!(psnr_cube(&out, &scene).unwrap() >= 40.0);
    }

    #[test]
    fn degenerate_masks_propagate() {
        let mut masks = Tensor::filled(&[2, 4, 4], 1.0);
        masks.data_mut()[5] = 0.0;
        masks.data_mut()[16 + 5] = 0.0;
        let sys = SciSystem::new(masks).unwrap();
        let y = Tensor::filled(&[4, 4], 1.0);
        assert!(matches!(
            run_gap_tv(&y, &sys, &GapTvConfig::default()),
            Err(Error::DegenerateMask { row: 1, col: 1 })
        ));
        let mut rng = Rng::new(12);
        let model = ElpModel::new(
            CnnConfig {
                frames: 2,
                widths: vec![2, 2],
                ..Default::default()
            },
            1,
            0,
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            model.reconstruct(&y, &sys),
            Err(Error::DegenerateMask { .. })
        ));
    }

    #[test]
    fn cnn_model_runs_with_fewer_frames() {
        let mut rng = Rng::new(13);
        let cfg = CnnConfig {
            frames: 8,
            widths: vec![4, 8],
            ..Default::default()
        };
        let model = ElpModel::new(cfg, 2, 1, &mut rng).unwrap();
        for b in [3, 5, 8] {
            let (sys, _, y) = random_system(b, 8, 8, 14 + b as u64);
            let run = model.reconstruct(&y, &sys).unwrap();
            assert_eq!(run.output.dims(), &[b, 8, 8]);
            assert_eq!(run.state.ledger.as_ref().unwrap().scales.len(), 2);
        }
        let (sys, _, y) = random_system(9, 8, 8, 30);
        assert!(matches!(model.reconstruct(&y, &sys), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_weight_model_matches_identity_prior() {
        let mut rng = Rng::new(15);
        let cfg = CnnConfig {
            frames: 3,
            widths: vec![2, 2],
            ..Default::default()
        };
        let mut model = ElpModel::new(cfg, 2, 2, &mut rng).unwrap();
        for p in model.params_mut() {
            if !p.name.contains("log_gamma") {
                p.value = Tensor::zeros(p.value.dims());
            }
        }
        let (sys, _, y) = random_system(3, 4, 4, 16);
        let cnn = model.reconstruct(&y, &sys).unwrap();
        let id = run_elp(&y, &sys, &model.schedule(), StagePrior::Identity).unwrap();
        assert!(cnn.state.x.max_abs_diff(&id.state.x).unwrap() < 1e-12);
    }

    #[test]
    fn extension_copies_stages() {
        let mut rng = Rng::new(17);
        let cfg = CnnConfig {
            frames: 2,
            widths: vec![2, 2],
            ..Default::default()
        };
        let mut base = ElpModel::new(cfg, 3, 0, &mut rng).unwrap();
        base.log_gamma2[3].value = Tensor::scalar(-1.5);
        let ext = ElpModel::extend_from(&base, 3, 2, &mut rng).unwrap();
        assert_eq!(ext.stages(), 5);
        for i in 0..3 {
            assert_eq!(ext.priors[i].params()[0].value, base.priors[i].params()[0].value);
        }
        for i in 3..5 {
            assert_eq!(ext.priors[i].params()[0].value, base.priors[2].params()[0].value);
            let terms = (i - 1) as f64;
            assert!((ext.log_gamma2[i + 1].value.item() - (-1.5 - terms.ln())).abs() < 1e-15);
            assert_eq!(ext.log_gamma1[i + 1].value, base.log_gamma1[3].value);
        }
        let same = ElpModel::extend_from(&base, 3, 0, &mut rng).unwrap();
        let (sys, _, y) = random_system(2, 4, 4, 18);
        assert_eq!(
            same.reconstruct(&y, &sys).unwrap().state.x,
            base.reconstruct(&y, &sys).unwrap().state.x
        );
        let single = ElpModel::new(base.config().clone(), 1, 0, &mut rng).unwrap();
        assert!(ElpModel::extend_from(&single, 1, 2, &mut rng).is_err());
    }
}
