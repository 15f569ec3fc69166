//! Diffusion guidance: noise schedule, denoisers, distillation gradients and
//! resampling refinement.

pub mod adapter;
pub mod checkpoint;
pub mod conv;
pub mod denoiser;
pub mod distill;
pub mod schedule;

pub use adapter::{adapter_step, jitter_adapter, AdaptedDenoiser, AdapterConfig, AdapterSample};
pub use denoiser::{Denoiser, DenoiserConfig, NoiseQuery, StyleToken, ToyDenoiser};
pub use distill::{draw_noise, generate, FixedCondition, lg_vsd_gradient, resample_refine, sds_gradient, vsd_gradient, RefineMode};
pub use schedule::{NoiseSchedule, Weighting};
