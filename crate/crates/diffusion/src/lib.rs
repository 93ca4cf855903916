//! A small pixel-space diffusion model conditioned on per-pixel geometry.
//!
//! The conditioning channels of a [`geocond::ConditioningPack`] are
//! convolved by zero-initialized weights and added to the image stem, and
//! every self-attention layer shifts its scores by the pack's log-density
//! at that resolution.

pub mod batch;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use error::{DiffusionError, Result};
pub use model::{Denoiser, DenoiserConfig, ModelInput};
pub use sample::{sample, SampleOptions, SampleRequest};
pub use schedule::DiffusionSchedule;
pub use train::{fit, Example, TrainConfig, TrainRun, Trainer};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/denoiser.md")]
struct BookDenoiser;
