//! Run configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::painter::PainterOracle;
use super::sampler::SamplerConfig;
use super::toy::toy_field_config;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::guidance::{AdapterConfig, DenoiserConfig, RefineMode, StyleToken};
use crate::render::SamplingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lg_vsd: f64,
    pub feature: f64,
    pub depth: f64,
    pub sky: f64,
    pub refine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lg_vsd: 1.0, feature: 0.1, depth: 0.05, sky: 0.1, refine: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { lg_vsd: 0.0, feature: 0.0, depth: 0.0, sky: 0.0, refine: 0.0 }
    }

    fn all(&self) -> [f64; 5] {
        [self.lg_vsd, self.feature, self.depth, self.sky, self.refine]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSettings {
    /// Perturbation level as a fraction of the schedule length.
    pub t0_fraction: f64,
    pub steps: usize,
    pub mode: RefineMode,
    /// Feed the layout condition maps to the denoiser while resampling.
    pub conditional: bool,
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self { t0_fraction: 0.2, steps: 10, mode: RefineMode::Stochastic, conditional: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Side of the random training crops; 0 trains on whole images.
    pub crop: usize,
    pub resolution: usize,
    pub views_per_scene: usize,
    pub val_views: usize,
    pub lr: f64,
    /// Probability of dropping the condition so the unconditional branch is trained too.
    pub condition_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 4,
            crop: 32,
            resolution: 64,
            views_per_scene: 48,
            val_views: 8,
            lr: 2e-3,
            condition_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub coarse_resolution: usize,
    pub fine_resolution: usize,
    pub coarse_steps: usize,
    pub fine_steps: usize,
    pub refine_steps: usize,
    pub lr: f64,
    pub adapter_lr: f64,
    /// One adapter step every this many field steps.
    pub adapter_every: usize,
    pub adapter: AdapterConfig,
    pub clip_norm: f64,
    pub weights: LossWeights,
    /// Distillation timesteps are drawn from this fraction range of the schedule.
    pub t_range: [f64; 2],
    pub style: StyleToken,
    /// Ray sampling for the coarse phase; the fine phase and refinement use `fine_samples_per_ray`.
    pub sampling: SamplingConfig,
    pub fine_samples_per_ray: usize,
    pub refine: RefineSettings,
    /// Denoising steps used to produce the generated image for the feature loss.
    pub feature_steps: usize,
    pub field: FieldConfig,
    pub sampler: SamplerConfig,
    pub mono_noise: f64,
    pub eval_views: usize,
    /// Fraction of the full step budget spent on stuff/style edit fine-tunes.
    pub edit_fraction: f64,
    /// Steps between checkpoints and metric evaluations; 0 disables both mid-run.
    pub checkpoint_every: usize,
    pub painter: PainterOracle,
    pub denoiser: DenoiserConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coarse_resolution: 256,
            fine_resolution: 512,
            coarse_steps: 10_000,
            fine_steps: 0,
            refine_steps: 5_000,
            lr: 1e-3,
            adapter_lr: 1e-3,
            adapter_every: 1,
            adapter: AdapterConfig::default(),
            clip_norm: 1.0,
            weights: LossWeights::default(),
            t_range: [0.02, 0.98],
            style: 0,
            sampling: SamplingConfig::default(),
            fine_samples_per_ray: 96,
            refine: RefineSettings::default(),
            feature_steps: 4,
            field: FieldConfig::default(),
            sampler: SamplerConfig::default(),
            mono_noise: 0.02,
            eval_views: 8,
            edit_fraction: 0.1,
            checkpoint_every: 500,
            painter: PainterOracle::default(),
            denoiser: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for the toy street scene: 32² optimization, 64² refinement.
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            coarse_resolution: 32,
            fine_resolution: 64,
            coarse_steps: 300,
            fine_steps: 0,
            refine_steps: 150,
            lr: 1e-2,
            adapter_lr: 1e-3,
            sampling: SamplingConfig { samples_per_ray: 16, near: 0.05, far: 45.0, constrained: true },
            fine_samples_per_ray: 24,
            field: toy_field_config(seed),
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("coarse_resolution", self.coarse_resolution), ("fine_resolution", self.fine_resolution)] {
            if !r.is_power_of_two() {
                return Err(Error::validation(format!("{name} {r} is not a power of two")));
            }
        }
        if self.weights.all().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::validation("loss weights must be finite and non-negative"));
        }
        let [lo, hi] = self.t_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::validation(format!("t_range [{lo}, {hi}] must lie within [0, 1]")));
        }
        if !(0.0..1.0).contains(&self.refine.t0_fraction) {
            return Err(Error::validation("refine.t0_fraction must lie in [0, 1)"));
        }
        if !(self.lr > 0.0 && self.adapter_lr >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::validation("learning rates and clip_norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.edit_fraction) || !(0.0..=1.0).contains(&self.pretrain.condition_dropout) {
            return Err(Error::validation("fractions must lie in [0, 1]"));
        }
        if self.style >= self.denoiser.styles {
            return Err(Error::validation(format!("style {} outside vocabulary of {}", self.style, self.denoiser.styles)));
        }
        if self.adapter_every == 0 || self.fine_samples_per_ray == 0 {
            return Err(Error::validation("adapter_every and fine_samples_per_ray must be positive"));
        }
        self.sampling.validate()?;
        self.field.validate()?;
        self.denoiser.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse { what: "run config".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Sampling settings for a phase rendered at `res`.
    pub fn sampling_at(&self, res: usize) -> SamplingConfig {
        if res == self.coarse_resolution {
            self.sampling.clone()
        } else {
            SamplingConfig { samples_per_ray: self.fine_samples_per_ray, ..self.sampling.clone() }
        }
    }
}
