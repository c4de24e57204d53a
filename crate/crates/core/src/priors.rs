//! Denoising priors for the v-subproblem.
//!
//! Two realizations are provided: an anisotropic total-variation denoiser
//! solved by iterative clipping on the dual, and a small U-net ([`CnnPrior`])
//! whose input stacks `u`, a constant noise map holding `γ₂`, and the
//! normalized measurement `Ȳ`. Consecutive U-nets of one unfolded run are
//! densely connected through a [`FeatureLedger`] of per-scale feature sums.

use rayon::prelude::*;

use crate::autodiff::{Gradients, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Weights below this are treated as zero by [`denoise_tv`].
pub const TV_WEIGHT_EPS: f64 = 1e-12;

/// Anisotropic total variation of each frame, summed over frames.
pub fn total_variation(cube: &Tensor) -> f64 {
    let (b, h, w) = (cube.dims()[0], cube.dims()[1], cube.dims()[2]);
    let mut tv = 0.0;
    for f in 0..b {
        let p = cube.frame_slice(f);
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    tv += (p[y * w + x + 1] - p[y * w + x]).abs();
                }
                if y + 1 < h {
                    tv += (p[(y + 1) * w + x] - p[y * w + x]).abs();
                }
            }
        }
    }
    tv
}

/// `weight · TV(v) + ½‖u − v‖²`
pub fn tv_objective(u: &Tensor, v: &Tensor, weight: f64) -> Result<f64> {
    let fidelity = 0.5 * u.sub(v)?.norm().powi(2);
    Ok(weight * total_variation(v) + fidelity)
}

/// Approximate minimizer of `weight · TV(v) + ½‖u − v‖²` for a `[B, H, W]`
/// cube, frame by frame.
///
/// Projected gradient on the dual with step `1/8` (the squared norm bound of
/// the 2-D forward-difference operator). The result never has a larger
/// objective than `u` itself.
pub fn denoise_tv(u: &Tensor, weight: f64, iters: usize) -> Result<Tensor> {
    if u.rank() != 3 {
        return Err(Error::shape(format!(
            "denoise_tv expects [B, H, W], got {:?}",
            u.dims()
        )));
    }
    if !(weight >= 0.0) {
        return Err(Error::contract(format!("TV weight must be positive, got {weight}")));
    }
    if weight < TV_WEIGHT_EPS || iters == 0 {
        return Ok(u.clone());
    }
    let (b, h, w) = (u.dims()[0], u.dims()[1], u.dims()[2]);
    let frames: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|f| tv_frame(u.frame_slice(f), h, w, weight, iters))
        .collect();
    let v = Tensor::new(vec![b, h, w], frames.concat())?;
    if tv_objective(u, &v, weight)? > tv_objective(u, u, weight)? {
        return Ok(u.clone());
    }
    Ok(v)
}

fn tv_frame(u: &[f64], h: usize, w: usize, weight: f64, iters: usize) -> Vec<f64> {
    const STEP: f64 = 1.0 / 8.0;
    // p: horizontal duals at (y, x) for x < w-1, q: vertical duals for y < h-1
    let mut p = vec![0.0; h * w];
    let mut q = vec![0.0; h * w];
    let mut v = u.to_vec();
    let primal = |p: &[f64], q: &[f64], v: &mut [f64]| {
        // v = u - Dᵀ[p; q]
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut div = 0.0;
                if x + 1 < w {
                    div -= p[i];
                }
                if x > 0 {
                    div += p[i - 1];
                }
                if y + 1 < h {
                    div -= q[i];
                }
                if y > 0 {
                    div += q[i - w];
                }
                v[i] = u[i] - div;
            }
        }
    };
    for _ in 0..iters {
        primal(&p, &q, &mut v);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    p[i] = (p[i] + STEP * (v[i + 1] - v[i])).clamp(-weight, weight);
                }
                if y + 1 < h {
                    q[i] = (q[i] + STEP * (v[i + w] - v[i])).clamp(-weight, weight);
                }
            }
        }
    }
    primal(&p, &q, &mut v);
    v
}

/// Inputs of one CNN denoising call.
#[derive(Clone, Debug)]
pub struct DenoiserInput {
    /// `u = x − λ₂/γ₂`, `[B, H, W]`
    pub u: Tensor,
    /// `[H, W]`, every element `γ₂`
    pub noise_map: Tensor,
    /// `[H, W]`
    pub y_norm: Tensor,
}

impl DenoiserInput {
    pub fn new(u: Tensor, gamma2: f64, y_norm: Tensor) -> Result<Self> {
        if u.rank() != 3 || y_norm.dims() != &u.dims()[1..] {
            return Err(Error::shape(format!(
                "denoiser input u {:?} / y_norm {:?} mismatch",
                u.dims(),
                y_norm.dims()
            )));
        }
        let noise_map = Tensor::filled(y_norm.dims(), gamma2);
        Ok(Self {
            u,
            noise_map,
            y_norm,
        })
    }

    /// The `B + 2` channel stack: frames of `u`, then the noise map, then `Ȳ`.
    pub fn channels(&self) -> Result<Tensor> {
        let plane = |t: &Tensor| t.clone().reshape(&[1, t.dims()[0], t.dims()[1]]);
        let side = tensor::concat_channels(&plane(&self.noise_map)?, &plane(&self.y_norm)?)?;
        tensor::concat_channels(&self.u, &side)
    }
}

/// Running per-scale feature sums `E_sum,j` handed from one prior to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLedger {
    pub scales: Vec<Tensor>,
}

/// A [`FeatureLedger`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct LedgerVar<'t> {
    pub scales: Vec<Var<'t>>,
}

impl<'t> LedgerVar<'t> {
    pub fn bind(tape: &'t Tape, ledger: &FeatureLedger) -> Self {
        Self {
            scales: ledger.scales.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn values(&self) -> FeatureLedger {
        FeatureLedger {
            scales: self.scales.iter().map(|v| (*v.value()).clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    /// Maximum number of video frames `B_max`; the network sees `B_max + 2` channels.
    pub frames: usize,
    /// Feature width per scale, finest first.
    pub widths: Vec<usize>,
    pub convs_per_scale: usize,
    pub kernel: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            widths: vec![8, 16, 32],
            convs_per_scale: 2,
            kernel: 3,
        }
    }
}

impl CnnConfig {
    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.scales() - 1)
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::contract(format!("invalid CNN config {self:?}")));
        }
        if self.convs_per_scale == 0 || self.kernel % 2 == 0 {
            return Err(Error::contract(format!("invalid CNN config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    weight: usize,
    bias: usize,
}

/// One U-net denoising prior.
///
/// With `dense == false` this is the first prior of a run: it takes no
/// ledger. Otherwise the local feature `E_j` at every scale is concatenated
/// with the incoming `E_sum,j` and the fused tensor feeds both the next
/// (coarser) encoder scale and the decoder skip at that scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnPrior {
    config: CnnConfig,
    dense: bool,
    params: Vec<Parameter>,
    encoder: Vec<Vec<Conv>>,
    decoder: Vec<Vec<Conv>>,
    head: Conv,
}

impl CnnPrior {
    /// He-initialized prior; the output head is scaled by `0.1` so a fresh
    /// network starts close to the identity map.
    pub fn new(config: CnnConfig, dense: bool, prefix: &str, rng: &mut Rng) -> Result<Self> {
        Self::build(config, dense, prefix, |dims, fan_in, is_head| {
            let std = (2.0 / fan_in as f64).sqrt() * if is_head { 0.1 } else { 1.0 };
            Tensor::from_fn(dims, |_| std * rng.normal())
        })
    }

    /// All weights and biases zero: the prior is exactly the identity.
    pub fn zeroed(config: CnnConfig, dense: bool, prefix: &str) -> Result<Self> {
        Self::build(config, dense, prefix, |dims, _, _| Tensor::zeros(dims))
    }

    fn build(
        config: CnnConfig,
        dense: bool,
        prefix: &str,
        mut init: impl FnMut(&[usize], usize, bool) -> Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut params = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, is_head: bool| -> Conv {
            let dims = [cout, cin, k, k];
            let weight = init(&dims, cin * k * k, is_head);
            params.push(Parameter::new(format!("{name}.weight"), weight));
            params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])));
            Conv {
                weight: params.len() - 2,
                bias: params.len() - 1,
            }
        };
        let widths = &config.widths;
        let fused = |j: usize| widths[j] * if dense { 2 } else { 1 };
        let scales = widths.len();

        let mut encoder = Vec::with_capacity(scales);
        for j in 0..scales {
            let mut cin = if j == 0 { config.frames + 2 } else { fused(j - 1) };
            let mut block = Vec::new();
            for c in 0..config.convs_per_scale {
                block.push(conv(format!("{prefix}.enc{j}.conv{c}"), cin, widths[j], false));
                cin = widths[j];
            }
            encoder.push(block);
        }
        let mut decoder = vec![Vec::new(); scales.saturating_sub(1)];
        let mut below = fused(scales - 1);
        for j in (0..scales - 1).rev() {
            let mut cin = below + fused(j);
            for c in 0..config.convs_per_scale {
                decoder[j].push(conv(format!("{prefix}.dec{j}.conv{c}"), cin, widths[j], false));
                cin = widths[j];
            }
            below = widths[j];
        }
        let head = conv(format!("{prefix}.head"), below, config.frames, true);
        Ok(Self {
            config,
            dense,
            params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    /// Whether this prior consumes an incoming feature ledger.
    pub fn is_dense(&self) -> bool {
        self.dense
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies every parameter value from a prior of identical topology,
    /// keeping this prior's names.
    pub fn copy_weights_from(&mut self, other: &CnnPrior) -> Result<()> {
        if self.config != other.config || self.dense != other.dense {
            return Err(Error::shape(
                "cannot copy weights between priors of different topology",
            ));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    pub fn accumulate(&mut self, bound: &[Var<'_>], grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            p.accumulate(grads, v);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let d = self.config.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!(
                "spatial size {h}x{w} is not divisible by {d} ({} scales)",
                self.config.scales()
            )));
        }
        Ok(())
    }

    /// Network evaluation on a tape.
    ///
    /// `input` is the `[B_max + 2, H, W]` channel stack, `u` its first
    /// `B_max` channels as their own var. Returns `v = u + net(input)` and the
    /// outgoing ledger.
    pub fn forward<'t>(
        &self,
        bound: &[Var<'t>],
        input: Var<'t>,
        u: Var<'t>,
        ledger: Option<&LedgerVar<'t>>,
    ) -> Result<(Var<'t>, LedgerVar<'t>)> {
        let dims = input.dims();
        if dims.len() != 3 || dims[0] != self.config.frames + 2 {
            return Err(Error::shape(format!(
                "prior expects {} input channels, got {dims:?}",
                self.config.frames + 2
            )));
        }
        self.check_spatial(dims[1], dims[2])?;
        match (self.dense, ledger) {
            (true, None) => {
                return Err(Error::shape("densely connected prior needs an incoming ledger"))
            }
            (false, Some(_)) => {
                return Err(Error::shape("first prior does not take an incoming ledger"))
            }
            _ => {}
        }
        if let Some(l) = ledger {
            if l.scales.len() != self.config.scales() {
                return Err(Error::shape(format!(
                    "ledger has {} scales, prior has {}",
                    l.scales.len(),
                    self.config.scales()
                )));
            }
        }
        let apply = |c: &Conv, x: Var<'t>| x.conv2d(bound[c.weight], bound[c.bias]);

        let mut fused: Vec<Var<'t>> = Vec::with_capacity(self.config.scales());
        let mut ledger_out = Vec::with_capacity(self.config.scales());
        let mut x = input;
        for (j, block) in self.encoder.iter().enumerate() {
            if j > 0 {
                x = fused[j - 1].avg_pool2()?;
            }
            for c in block {
                x = apply(c, x)?.relu();
            }
            let local = x;
            match ledger {
                Some(l) => {
                    let incoming = l.scales[j];
                    if incoming.dims() != local.dims() {
                        return Err(Error::shape(format!(
                            "ledger scale {j} is {:?}, local feature is {:?}",
                            incoming.dims(),
                            local.dims()
                        )));
                    }
                    fused.push(local.concat(incoming)?);
                    ledger_out.push(incoming.add(local)?);
                }
                None => {
                    fused.push(local);
                    ledger_out.push(local);
                }
            }
        }
        let mut d = fused[self.config.scales() - 1];
        for j in (0..self.config.scales() - 1).rev() {
            d = d.upsample2()?.concat(fused[j])?;
            for c in &self.decoder[j] {
                d = apply(c, d)?.relu();
            }
        }
        let correction = apply(&self.head, d)?;
        Ok((u.add(correction)?, LedgerVar { scales: ledger_out }))
    }
}

/// One CNN denoising step: `v = u + network(u, γ₂ map, Ȳ)`.
pub fn denoise_cnn(
    input: &DenoiserInput,
    prior: &CnnPrior,
    ledger_in: Option<&FeatureLedger>,
) -> Result<(Tensor, FeatureLedger)> {
    if input.u.dims()[0] != prior.config.frames {
        return Err(Error::shape(format!(
            "prior expects {} frames, got {}",
            prior.config.frames,
            input.u.dims()[0]
        )));
    }
    let tape = Tape::new();
    let bound = prior.bind_constant(&tape);
    let ledger = ledger_in.map(|l| LedgerVar::bind(&tape, l));
    let u = tape.constant(input.u.clone());
    let channels = tape.constant(input.channels()?);
    let (v, out) = prior.forward(&bound, channels, u, ledger.as_ref())?;
    let v = (*v.value()).clone();
    Ok((v, out.values()))
}
