//! Discrete DDPM noise schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Weighting {
    /// ω(t) = c.
    Constant { value: f64 },
    /// ω(t) = 1 − ᾱ_t.
    OneMinusAlphaBar,
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Constant { value: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub weighting: Weighting,
    /// Timesteps are drawn from `[t_min, t_max] · steps`.
    pub t_range: (f64, f64),
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self {
            steps,
            beta_start,
            beta_end,
            betas,
            alpha_bar,
            weighting: Weighting::default(),
            t_range: (0.02, 0.98),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("noise schedule needs at least one step"));
        }
        let (lo, hi) = self.t_range;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::validation("timestep range must satisfy 0 <= lo <= hi <= 1"));
        }
        if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end) {
            return Err(Error::validation("betas must lie in (0, 1) and increase"));
        }
        Ok(())
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn weight(&self, t: usize) -> f64 {
        match self.weighting {
            Weighting::Constant { value } => value,
            Weighting::OneMinusAlphaBar => 1.0 - self.alpha_bar[t],
        }
    }

    /// Timestep uniform in `[t_min, t_max] · steps`, clamped to a valid index.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let (lo, hi) = self.t_range;
        let u = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        ((u * self.steps as f64) as usize).min(self.steps - 1)
    }

    /// `x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε`.
    pub fn perturb(&self, x0: &Tensor3, t: usize, noise: &Tensor3) -> Result<Tensor3> {
        if t >= self.steps {
            return Err(Error::validation(format!("timestep {t} >= {}", self.steps)));
        }
        let ab = self.alpha_bar[t];
        x0.lincomb(ab.sqrt(), noise, (1.0 - ab).sqrt())
    }
}
