//! Ensemble-prior deep unfolding for video snapshot compressive imaging.
//!
//! A snapshot camera modulates `B` video frames with per-frame masks and sums
//! them into a single coded image. This crate simulates that process
//! ([`forward`]), inverts it with an unfolded ADMM solver whose denoising
//! priors are small trainable U-nets ([`unfolding`], [`priors`]), and trains
//! those priors end to end with a from-scratch reverse-mode autodiff tape
//! ([`autodiff`], [`training`]). A GAP-TV baseline and PSNR/SSIM metrics are
//! included for comparison.

pub mod autodiff;
pub mod error;
pub mod forward;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod priors;
pub mod projection;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod unfolding;

#[cfg(test)]
mod testutil;

pub use autodiff::{Gradients, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use forward::SciSystem;
pub use io::Checkpoint;
pub use metrics::{psnr, psnr_cube, ssim, ssim_cube, MetricReport};
pub use priors::{denoise_cnn, denoise_tv, CnnConfig, CnnPrior, DenoiserInput, FeatureLedger};
pub use projection::{project_ensemble, project_single, PriorTerm};
pub use rng::Rng;
pub use tensor::Tensor;
pub use training::{train_two_period, SceneKind, TrainConfig, TrainReport};
pub use unfolding::{run_elp, run_gap_tv, ElpModel, ElpRun, GapTvConfig, StagePrior, StageSchedule, TvPrior};
