//! Score-distillation gradients and perturb-then-denoise resampling.
//!
//! Images are in the signed `[-1, 1]` range the denoisers operate in.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, NoiseQuery, StyleToken};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// The shared `(t, ε, x_t)` draw seen by both denoiser evaluations.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor3,
    pub x_t: Tensor3,
}

pub fn draw_noise<R: Rng + ?Sized>(x0: &Tensor3, schedule: &NoiseSchedule, rng: &mut R) -> Result<NoiseDraw> {
    let t = schedule.sample_timestep(rng);
    let eps = Tensor3::randn(x0.channels, x0.height, x0.width, rng);
    let x_t = schedule.perturb(x0, t, &eps)?;
    Ok(NoiseDraw { t, eps, x_t })
}

fn weighted_difference(schedule: &NoiseSchedule, t: usize, a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    let w = schedule.weight(t);
    a.lincomb(w, b, -w)
}

/// `ω(t)(ε_p(x_t, t, y, cond) − ε)`.
pub fn sds_gradient<R: Rng + ?Sized>(
    x0: &Tensor3,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    condition: Option<&Tensor3>,
    style: StyleToken,
    rng: &mut R,
) -> Result<Tensor3> {
    let d = draw_noise(x0, schedule, rng)?;
    let q = NoiseQuery { x_t: &d.x_t, t: d.t, condition, style, camera: None };
    let eps_p = denoiser.predict_noise(&q)?;
    weighted_difference(schedule, d.t, &eps_p, &d.eps)
}

/// `ω(t)(ε_p(x_t, t, y, cond) − ε_φ(x_t, t, T, y, cond))` for an explicit draw.
pub fn paired_gradient(
    draw: &NoiseDraw,
    base: &dyn Denoiser,
    adapted: &dyn Denoiser,
    schedule: &NoiseSchedule,
    condition: Option<&Tensor3>,
    camera: &[f64; 12],
    style: StyleToken,
) -> Result<Tensor3> {
    let q_base = NoiseQuery { x_t: &draw.x_t, t: draw.t, condition, style, camera: None };
    let q_adapted = NoiseQuery { camera: Some(camera), ..q_base };
    let eps_p = base.predict_noise(&q_base)?;
    let eps_phi = adapted.predict_noise(&q_adapted)?;
    weighted_difference(schedule, draw.t, &eps_p, &eps_phi)
}

/// Unconditional variational score distillation.
pub fn vsd_gradient<R: Rng + ?Sized>(
    x0: &Tensor3,
    base: &dyn Denoiser,
    adapted: &dyn Denoiser,
    schedule: &NoiseSchedule,
    camera: &[f64; 12],
    style: StyleToken,
    rng: &mut R,
) -> Result<Tensor3> {
    let d = draw_noise(x0, schedule, rng)?;
    paired_gradient(&d, base, adapted, schedule, None, camera, style)
}

/// Layout-guided variant: the same condition tensor is fed to both denoisers.
#[allow(clippy::too_many_arguments)]
pub fn lg_vsd_gradient<R: Rng + ?Sized>(
    x0: &Tensor3,
    base: &dyn Denoiser,
    adapted: &dyn Denoiser,
    schedule: &NoiseSchedule,
    condition: &Tensor3,
    camera: &[f64; 12],
    style: StyleToken,
    rng: &mut R,
) -> Result<Tensor3> {
    if condition.height != x0.height || condition.width != x0.width {
        return Err(Error::shape(
            format!("condition {}x{}", x0.height, x0.width),
            format!("{}x{}", condition.height, condition.width),
        ));
    }
    let d = draw_noise(x0, schedule, rng)?;
    paired_gradient(&d, base, adapted, schedule, Some(condition), camera, style)
}

/// Wraps a denoiser so that unconditional queries see a fixed condition tensor.
pub struct FixedCondition<'a> {
    pub inner: &'a dyn Denoiser,
    pub condition: &'a Tensor3,
}

impl Denoiser for FixedCondition<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn predict_noise(&self, q: &NoiseQuery<'_>) -> Result<Tensor3> {
        let q = NoiseQuery { condition: Some(q.condition.unwrap_or(self.condition)), ..*q };
        self.inner.predict_noise(&q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Stochastic,
    Deterministic,
}

/// Descending timesteps from `t0` to 0 with at most `steps + 1` entries.
pub fn refine_timesteps(t0: usize, steps: usize) -> Vec<usize> {
    let steps = steps.max(1);
    let mut ts: Vec<usize> = (0..=steps)
        .map(|i| ((t0 as f64) * (1.0 - i as f64 / steps as f64)).round() as usize)
        .collect();
    ts.dedup();
    ts
}

fn denoise_from<R: Rng + ?Sized>(
    mut x: Tensor3,
    ts: &[usize],
    condition: Option<&Tensor3>,
    style: StyleToken,
    denoiser: &dyn Denoiser,
    mode: RefineMode,
    rng: &mut R,
) -> Result<Tensor3> {
    let schedule = denoiser.schedule();
    let eta = match mode {
        RefineMode::Stochastic => 1.0,
        RefineMode::Deterministic => 0.0,
    };
    for (i, &t) in ts.iter().enumerate() {
        let q = NoiseQuery { x_t: &x, t, condition, style, camera: None };
        let eps = denoiser.predict_noise(&q)?;
        let ab = schedule.alpha_bar(t);
        let x0 = x.lincomb(1.0 / ab.sqrt(), &eps, -(1.0 - ab).sqrt() / ab.sqrt())?.map(|v| v.clamp(-1.0, 1.0));
        let Some(&t_prev) = ts.get(i + 1) else {
            return Ok(x0);
        };
        // Noise direction consistent with the clipped estimate.
        let eps = x.lincomb(1.0 / (1.0 - ab).sqrt(), &x0, -ab.sqrt() / (1.0 - ab).sqrt())?;
        let ab_prev = schedule.alpha_bar(t_prev);
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = x0.lincomb(ab_prev.sqrt(), &eps, dir)?;
        if sigma > 0.0 {
            let z = Tensor3::randn(x.channels, x.height, x.width, rng);
            next.add_assign_scaled(&z, sigma)?;
        }
        x = next;
    }
    Ok(x)
}

/// Perturbs `image` to `t0` and denoises back to step 0 in `steps` strided
/// updates, returning the final clean estimate. `t0 = 0` returns the input.
#[allow(clippy::too_many_arguments)]
pub fn resample_refine<R: Rng + ?Sized>(
    image: &Tensor3,
    condition: Option<&Tensor3>,
    style: StyleToken,
    denoiser: &dyn Denoiser,
    t0: usize,
    steps: usize,
    mode: RefineMode,
    rng: &mut R,
) -> Result<Tensor3> {
    let schedule = denoiser.schedule();
    if t0 >= schedule.steps {
        return Err(Error::validation(format!("t0 {t0} >= {}", schedule.steps)));
    }
    if t0 == 0 {
        return Ok(image.clone());
    }
    let eps = Tensor3::randn(image.channels, image.height, image.width, rng);
    let x = schedule.perturb(image, t0, &eps)?;
    denoise_from(x, &refine_timesteps(t0, steps), condition, style, denoiser, mode, rng)
}

/// Full reverse process from pure noise.
pub fn generate<R: Rng + ?Sized>(
    shape: (usize, usize, usize),
    condition: Option<&Tensor3>,
    style: StyleToken,
    denoiser: &dyn Denoiser,
    steps: usize,
    mode: RefineMode,
    rng: &mut R,
) -> Result<Tensor3> {
    let t_max = denoiser.schedule().steps - 1;
    let x = Tensor3::randn(shape.0, shape.1, shape.2, rng);
    denoise_from(x, &refine_timesteps(t_max, steps), condition, style, denoiser, mode, rng)
}
