//! End-to-end training of the unfolded network.
//!
//! Training runs in two periods. The first trains a pure single-prior model.
//! The second extends it with ensemble stages, copies the trained stages,
//! seeds every added stage from the last trained one, and continues end to
//! end. Each batch element gets its own tape; the per-sample forward and
//! backward passes run on the rayon pool and their gradients are summed in
//! batch order, so a run is bit-identical for a fixed seed regardless of the
//! thread count.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::forward::SciSystem;
use crate::io::{atomic_write, parse_kv};
use crate::priors::CnnConfig;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};
use crate::unfolding::ElpModel;

/// `(1/(S·B·H·W)) Σ ‖X − X̂‖²` over a batch.
pub fn mse_loss(pred: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "batch sizes differ or are empty: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        p.expect_same_dims(t)?;
        sum += p.sub(t)?.norm().powi(2);
        count += p.len();
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(dims: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = dims.into_iter().map(Tensor::zeros).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        p.expect_same_dims(&grads[i])?;
        p.expect_same_dims(&state.m[i])?;
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mk, gk) in m.iter_mut().zip(g) {
            *mk = hp.beta1 * *mk + (1.0 - hp.beta1) * gk;
        }
        let v = state.v[i].data_mut();
        for (vk, gk) in v.iter_mut().zip(g) {
            *vk = hp.beta2 * *vk + (1.0 - hp.beta2) * gk * gk;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Step decay held constant during warm-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub decay: f64,
    pub interval: usize,
    pub warmup: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            decay: 0.9,
            interval: 15,
            warmup: 5,
        }
    }
}

/// `lr0 · decay^⌊max(0, epoch − warmup) / interval⌋`
pub fn learning_rate(lr0: f64, epoch: usize, s: &LrSchedule) -> f64 {
    let k = epoch.saturating_sub(s.warmup) / s.interval.max(1);
    lr0 * s.decay.powi(k as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    MovingSquare,
    MovingGradient,
}

impl SceneKind {
    pub const ALL: [SceneKind; 2] = [SceneKind::MovingSquare, SceneKind::MovingGradient];
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving-square" => Ok(Self::MovingSquare),
            "moving-gradient" => Ok(Self::MovingGradient),
            other => Err(Error::contract(format!(
                "unknown scene kind `{other}` (expected moving-square or moving-gradient)"
            ))),
        }
    }
}

/// A synthetic clip whose frames translate toroidally at constant velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub frames: Tensor,
    pub kind: SceneKind,
    /// `(dx, dy)` pixels per frame.
    pub velocity: (i64, i64),
}

/// Renders `frames` frames of a `height × width` scene. Frame `t` is frame 0
/// shifted by `t · velocity` with wraparound.
pub fn synth_scene(
    kind: SceneKind,
    height: usize,
    width: usize,
    frames: usize,
    velocity: (i64, i64),
    rng: &mut Rng,
) -> SyntheticScene {
    let (h, w) = (height as f64, width as f64);
    let tau = std::f64::consts::TAU;
    let wave = |amp: f64, rng: &mut Rng| {
        let fx = rng.below(3) as f64;
        let fy = rng.below(3) as f64;
        let phase = rng.uniform_range(0.0, tau);
        move |y: f64, x: f64| amp * (tau * (fx * x / w + fy * y / h) + phase).sin()
    };
    let base: Vec<f64> = match kind {
        SceneKind::MovingSquare => {
            let level = rng.uniform_range(0.1, 0.3);
            let shade = wave(rng.uniform_range(0.0, 0.08), rng);
            let mut img: Vec<f64> = (0..height * width)
                .map(|i| level + shade((i / width) as f64, (i % width) as f64))
                .collect();
            for size_frac in [0.4, 0.2] {
                let side = ((width.min(height) as f64 * size_frac).round() as usize).max(1);
                let value = rng.uniform_range(0.55, 1.0);
                let (oy, ox) = (rng.below(height), rng.below(width));
                for dy in 0..side {
                    for dx in 0..side {
                        img[((oy + dy) % height) * width + (ox + dx) % width] = value;
                    }
                }
            }
            img
        }
        SceneKind::MovingGradient => {
            let a = wave(0.25, rng);
            let b = wave(0.2, rng);
            (0..height * width)
                .map(|i| {
                    let (y, x) = ((i / width) as f64, (i % width) as f64);
                    0.5 + a(y, x) + b(y, x)
                })
                .collect()
        }
    };
    let wrap = |v: i64, n: usize| v.rem_euclid(n as i64) as usize;
    let mut data = Vec::with_capacity(frames * height * width);
    for t in 0..frames as i64 {
        for y in 0..height {
            for x in 0..width {
                let sy = wrap(y as i64 - t * velocity.1, height);
                let sx = wrap(x as i64 - t * velocity.0, width);
                data.push(base[sy * width + sx].clamp(0.0, 1.0));
            }
        }
    }
    SyntheticScene {
        frames: Tensor::new(vec![frames, height, width], data).expect("sizes agree"),
        kind,
        velocity,
    }
}

/// `count` scenes cycling through `kinds` with velocities in `-2..=2` per
/// axis.
pub fn synth_dataset(
    kinds: &[SceneKind],
    count: usize,
    height: usize,
    width: usize,
    frames: usize,
    rng: &mut Rng,
) -> Vec<Tensor> {
    assert!(!kinds.is_empty(), "no scene kinds");
    (0..count)
        .map(|i| {
            let velocity = (rng.below(5) as i64 - 2, rng.below(5) as i64 - 2);
            synth_scene(kinds[i % kinds.len()], height, width, frames, velocity, rng).frames
        })
        .collect()
}

/// Frame order that fills `max` slots by repeating `actual` frames and
/// truncating the last repetition.
pub fn temporal_index(actual: usize, max: usize) -> Result<Vec<usize>> {
    if actual == 0 || actual > max {
        return Err(Error::contract(format!(
            "cannot rearrange {actual} frames into {max}"
        )));
    }
    Ok((0..max).map(|k| k % actual).collect())
}

/// `[B_actual, H, W] -> [B_max, H, W]` per [`temporal_index`].
pub fn rearrange_temporal(frames: &Tensor, max: usize) -> Result<Tensor> {
    if frames.rank() != 3 {
        return Err(Error::shape(format!("expected [B, H, W], got {:?}", frames.dims())));
    }
    tensor::gather_frames(frames, &temporal_index(frames.dims()[0], max)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    /// Frames the priors are built for (`B_max`).
    pub frames: usize,
    /// Frame counts drawn uniformly per batch.
    pub frame_counts: Vec<usize>,
    pub widths: Vec<usize>,
    pub convs_per_scale: usize,
    pub single_stages: usize,
    pub ensemble_stages: usize,
    pub epochs_single: usize,
    pub epochs_ensemble: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr_single: f64,
    pub lr_ensemble: f64,
    pub lr_schedule: LrSchedule,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Draw a fresh Bernoulli(0.5) mask set for every training sample
    /// instead of reusing the fixed system.
    pub resample_masks: bool,
    /// Synthetic scenes generated when no data directory is given.
    pub scenes: usize,
    /// Kinds the synthetic scenes cycle through.
    pub scene_kinds: Vec<SceneKind>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 8,
            frame_counts: vec![8],
            widths: vec![8, 16, 32],
            convs_per_scale: 2,
            single_stages: 3,
            ensemble_stages: 2,
            epochs_single: 10,
            epochs_ensemble: 10,
            steps_per_epoch: 10,
            batch_size: 3,
            lr_single: 2e-3,
            lr_ensemble: 1e-3,
            lr_schedule: LrSchedule::default(),
            sigma_min: 0.0,
            sigma_max: 0.0,
            resample_masks: true,
            scenes: 400,
            scene_kinds: SceneKind::ALL.to_vec(),
            seed: 7,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid value `{v}` for `{key}`"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_value(line, key, s.trim())).collect()
}

impl TrainConfig {
    /// Documented keys of the configuration file.
    pub const KEYS: &'static [&'static str] = &[
        "height",
        "width",
        "frames",
        "frame_counts",
        "widths",
        "convs_per_scale",
        "single_stages",
        "ensemble_stages",
        "epochs_single",
        "epochs_ensemble",
        "steps_per_epoch",
        "batch_size",
        "lr_single",
        "lr_ensemble",
        "lr_decay",
        "lr_interval",
        "lr_warmup",
        "sigma_min",
        "sigma_max",
        "resample_masks",
        "scenes",
        "scene_kinds",
        "seed",
    ];

    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut last_line = 0;
        for (line, key, v) in parse_kv(text)? {
            last_line = line;
            let v = v.as_str();
            match key.as_str() {
                "height" => c.height = parse_value(line, &key, v)?,
                "width" => c.width = parse_value(line, &key, v)?,
                "frames" => c.frames = parse_value(line, &key, v)?,
                "frame_counts" => c.frame_counts = parse_list(line, &key, v)?,
                "widths" => c.widths = parse_list(line, &key, v)?,
                "convs_per_scale" => c.convs_per_scale = parse_value(line, &key, v)?,
                "single_stages" => c.single_stages = parse_value(line, &key, v)?,
                "ensemble_stages" => c.ensemble_stages = parse_value(line, &key, v)?,
                "epochs_single" => c.epochs_single = parse_value(line, &key, v)?,
                "epochs_ensemble" => c.epochs_ensemble = parse_value(line, &key, v)?,
                "steps_per_epoch" => c.steps_per_epoch = parse_value(line, &key, v)?,
                "batch_size" => c.batch_size = parse_value(line, &key, v)?,
                "lr_single" => c.lr_single = parse_value(line, &key, v)?,
                "lr_ensemble" => c.lr_ensemble = parse_value(line, &key, v)?,
                "lr_decay" => c.lr_schedule.decay = parse_value(line, &key, v)?,
                "lr_interval" => c.lr_schedule.interval = parse_value(line, &key, v)?,
                "lr_warmup" => c.lr_schedule.warmup = parse_value(line, &key, v)?,
                "sigma_min" => c.sigma_min = parse_value(line, &key, v)?,
                "sigma_max" => c.sigma_max = parse_value(line, &key, v)?,
                "scenes" => c.scenes = parse_value(line, &key, v)?,
                "scene_kinds" => c.scene_kinds = parse_list(line, &key, v)?,
                "resample_masks" => c.resample_masks = parse_value(line, &key, v)?,
                "seed" => c.seed = parse_value(line, &key, v)?,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        c.validate().map_err(|e| Error::Parse {
            line: last_line,
            msg: e.to_string(),
        })?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(msg));
        if self.frames == 0 || self.batch_size == 0 || self.steps_per_epoch == 0 {
            return bad("frames, batch_size and steps_per_epoch must be positive".into());
        }
        if self.frame_counts.is_empty() || self.frame_counts.iter().any(|&b| b == 0 || b > self.frames) {
            return bad(format!("frame_counts {:?} must lie in 1..={}", self.frame_counts, self.frames));
        }
        if self.single_stages == 0 {
            return bad("single_stages must be positive".into());
        }
        if self.ensemble_stages > 0 && self.single_stages < 2 {
            return bad("ensemble stages need at least two single-prior stages".into());
        }
        if !(self.lr_single > 0.0 && self.lr_ensemble > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.epochs_ensemble > 0 && self.lr_ensemble >= self.lr_single {
            return bad(format!(
                "lr_ensemble ({}) must be below lr_single ({})",
                self.lr_ensemble, self.lr_single
            ));
        }
        if !(0.0 <= self.sigma_min && self.sigma_min <= self.sigma_max) {
            return bad(format!("noise range [{}, {}] is invalid", self.sigma_min, self.sigma_max));
        }
        if self.scene_kinds.is_empty() {
            return bad("scene_kinds must name at least one kind".into());
        }
        let d = 1usize << self.widths.len().saturating_sub(1);
        if self.height % d != 0 || self.width % d != 0 {
            return bad(format!("crop {}x{} not divisible by {d}", self.height, self.width));
        }
        Ok(())
    }

    pub fn cnn_config(&self) -> CnnConfig {
        CnnConfig {
            frames: self.frames,
            widths: self.widths.clone(),
            convs_per_scale: self.convs_per_scale,
            kernel: 3,
        }
    }

    pub fn total_steps(&self) -> usize {
        (self.epochs_single + self.epochs_ensemble) * self.steps_per_epoch
    }

    /// Deterministic synthetic training set and mask system for this config.
    pub fn synthetic_data(&self) -> (Vec<Tensor>, SciSystem) {
        let mut rng = Rng::new(self.seed).fork(0x5eed);
        let data = synth_dataset(&self.scene_kinds, self.scenes, self.height, self.width, self.frames, &mut rng);
        let system = SciSystem::bernoulli(self.frames, self.height, self.width, 0.5, &mut rng);
        (data, system)
    }
}

/// One training example: ground truth and its snapshot under the leading
/// `B` masks of the training system.
#[derive(Clone, Debug)]
pub struct Sample {
    pub truth: Tensor,
    pub y: Tensor,
    pub system: SciSystem,
}

impl Sample {
    /// Uses the leading masks of `system` when `truth` has fewer frames.
    pub fn new(truth: Tensor, system: &SciSystem, sigma: f64, rng: &mut Rng) -> Result<Self> {
        let system = if system.frames() == truth.dims()[0] {
            system.clone()
        } else {
            system.leading_frames(truth.dims()[0])?
        };
        let y = system.encode(&truth, sigma, rng)?;
        Ok(Self { truth, y, system })
    }
}

/// Per-sample MSE of the raw unfolded output and its gradient for every
/// parameter in [`ElpModel::params`] order.
pub fn sample_gradient(model: &ElpModel, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let (x, vars) = model.forward_on_tape(&tape, &sample.y, &sample.system)?;
    let diff = x.sub(tape.constant(sample.truth.clone()))?;
    let loss = diff.mul(diff)?.mean();
    let grads = tape.backward(loss)?;
    Ok((loss.value().item(), vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Mean loss and summed-then-averaged gradients over a batch.
pub fn batch_gradient(model: &ElpModel, batch: &[Sample]) -> Result<(f64, Vec<Tensor>)> {
    let parts: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| sample_gradient(model, s))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::contract("empty batch"))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi)?;
        }
    }
    Ok((loss * scale, grads.into_iter().map(|g| g.scale(scale)).collect()))
}

/// Batch MSE of the model's raw output, without gradients.
pub fn evaluate_loss(model: &ElpModel, batch: &[Sample]) -> Result<f64> {
    let preds: Vec<Tensor> = batch
        .par_iter()
        .map(|s| model.reconstruct(&s.y, &s.system).map(|r| r.state.x))
        .collect::<Result<_>>()?;
    let truths: Vec<Tensor> = batch.iter().map(|s| s.truth.clone()).collect();
    mse_loss(&preds, &truths)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub period: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Validation loss of the freshly initialized period-1 model.
    pub initial_val_loss: f64,
    /// Validation loss of the period-2 model before its first step.
    pub extended_val_loss: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_val_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_loss, |e| e.val_loss)
    }

    pub fn loss_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.into_inner().map_err(|e| Error::contract(format!("csv buffer: {e}")))
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.loss_csv()?)
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a [Tensor],
    /// One mask set per configured frame count.
    systems: Vec<SciSystem>,
    validation: Vec<Sample>,
    rng: Rng,
    step: usize,
}

impl Trainer<'_> {
    fn crop(&self, scene: &Tensor, frames: usize, rng: &mut Rng) -> Result<Tensor> {
        let d = scene.dims();
        let (h, w) = (self.cfg.height, self.cfg.width);
        let t0 = rng.below(d[0] - frames + 1);
        let y0 = rng.below(d[1] - h + 1);
        let x0 = rng.below(d[2] - w + 1);
        let mut out = Vec::with_capacity(frames * h * w);
        for f in t0..t0 + frames {
            let plane = scene.frame_slice(f);
            for y in y0..y0 + h {
                out.extend_from_slice(&plane[y * d[2] + x0..y * d[2] + x0 + w]);
            }
        }
        Tensor::new(vec![frames, h, w], out)
    }

    fn next_batch(&mut self) -> Result<Vec<Sample>> {
        let mut rng = self.rng.fork(self.step as u64);
        let pick = rng.below(self.cfg.frame_counts.len());
        let frames = self.cfg.frame_counts[pick];
        (0..self.cfg.batch_size)
            .map(|_| {
                let scene = &self.data[rng.below(self.data.len())];
                let truth = self.crop(scene, frames, &mut rng)?;
                let sigma = rng.uniform_range(self.cfg.sigma_min, self.cfg.sigma_max);
                if self.cfg.resample_masks {
                    let (h, w) = (self.cfg.height, self.cfg.width);
                    let system = SciSystem::bernoulli(frames, h, w, 0.5, &mut rng);
                    Sample::new(truth, &system, sigma, &mut rng)
                } else {
                    Sample::new(truth, &self.systems[pick], sigma, &mut rng)
                }
            })
            .collect()
    }

    fn run_period(
        &mut self,
        model: &mut ElpModel,
        period: usize,
        epochs: usize,
        lr0: f64,
        log: &mut Vec<EpochLog>,
    ) -> Result<()> {
        let dims: Vec<Vec<usize>> = model.params().iter().map(|p| p.value.dims().to_vec()).collect();
        let mut adam = AdamState::new(dims.iter().map(Vec::as_slice));
        let hp = AdamParams::default();
        for epoch in 0..epochs {
            let lr = learning_rate(lr0, epoch, &self.cfg.lr_schedule);
            let mut train_loss = 0.0;
            for _ in 0..self.cfg.steps_per_epoch {
                let batch = self.next_batch()?;
                let (loss, grads) = batch_gradient(model, &batch)?;
                self.step += 1;
                if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                    return Err(Error::NonFinite {
                        step: self.step,
                        value: loss,
                    });
                }
                let mut params: Vec<&mut Tensor> = model.params_mut().into_iter().map(|p| &mut p.value).collect();
                adam_step(&mut params, &grads, &mut adam, lr, &hp)?;
                train_loss += loss;
            }
            let val_loss = evaluate_loss(model, &self.validation)?;
            if !val_loss.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    value: val_loss,
                });
            }
            log.push(EpochLog {
                period,
                epoch,
                step: self.step,
                lr,
                train_loss: train_loss / self.cfg.steps_per_epoch as f64,
                val_loss,
            });
        }
        Ok(())
    }
}

/// Fixed validation batch: the leading `B_max` frames of the top-left crop
/// of the first `batch_size` scenes, encoded without noise.
pub fn validation_batch(cfg: &TrainConfig, data: &[Tensor], system: &SciSystem) -> Result<Vec<Sample>> {
    let mut rng = Rng::new(cfg.seed).fork(u64::MAX);
    data.iter()
        .take(cfg.batch_size)
        .map(|scene| {
            let (h, w) = (cfg.height, cfg.width);
            let full = scene.dims()[2];
            let truth = Tensor::from_fn(&[cfg.frames, h, w], |i| {
                let (f, r) = (i / (h * w), i % (h * w));
                scene.frame_slice(f)[(r / w) * full + r % w]
            });
            Sample::new(truth, system, 0.0, &mut rng)
        })
        .collect()
}

/// Trains the two-period schedule on `data` (cubes with at least `B_max`
/// frames and at least the crop size) measured through `system`.
pub fn train_two_period(cfg: &TrainConfig, data: &[Tensor], system: &SciSystem) -> Result<(ElpModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("training data is empty"));
    }
    for (i, scene) in data.iter().enumerate() {
        let d = scene.dims();
        if d.len() != 3 || d[0] < cfg.frames || d[1] < cfg.height || d[2] < cfg.width {
            return Err(Error::shape(format!(
                "scene {i} has dims {d:?}, need at least [{}, {}, {}]",
                cfg.frames, cfg.height, cfg.width
            )));
        }
    }
    if system.cube_dims() != [cfg.frames, cfg.height, cfg.width] {
        return Err(Error::shape(format!(
            "system {:?} does not match the training crop [{}, {}, {}]",
            system.cube_dims(),
            cfg.frames,
            cfg.height,
            cfg.width
        )));
    }
    let root = Rng::new(cfg.seed);
    // Leading masks of a short clip can leave pixels unexposed, so every
    // other frame count gets its own fully exposing mask set.
    let systems = cfg
        .frame_counts
        .iter()
        .map(|&b| {
            if b == cfg.frames {
                system.clone()
            } else {
                SciSystem::bernoulli(b, cfg.height, cfg.width, 0.5, &mut root.fork(100 + b as u64))
            }
        })
        .collect();
    let mut trainer = Trainer {
        cfg,
        data,
        systems,
        validation: validation_batch(cfg, data, system)?,
        rng: root.fork(1),
        step: 0,
    };
    let mut model = ElpModel::new(cfg.cnn_config(), cfg.single_stages, 0, &mut root.fork(2))?;
    let initial_val_loss = evaluate_loss(&model, &trainer.validation)?;
    let mut epochs = Vec::new();
    trainer.run_period(&mut model, 1, cfg.epochs_single, cfg.lr_single, &mut epochs)?;

    let mut extended_val_loss = None;
    if cfg.ensemble_stages > 0 {
        model = ElpModel::extend_from(&model, cfg.single_stages, cfg.ensemble_stages, &mut root.fork(3))?;
        extended_val_loss = Some(evaluate_loss(&model, &trainer.validation)?);
        trainer.run_period(&mut model, 2, cfg.epochs_ensemble, cfg.lr_ensemble, &mut epochs)?;
    }
    let report = TrainReport {
        initial_val_loss,
        extended_val_loss,
        epochs,
        steps: trainer.step,
    };
    Ok((model, report))
}
