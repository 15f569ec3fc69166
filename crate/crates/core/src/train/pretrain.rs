//! Toy denoiser pretraining on painter renderings of layout views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::PretrainConfig;
use super::painter::PainterOracle;
use super::sampler::{SamplerConfig, TrajectorySampler};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::guidance::denoiser::{noise_loss, PredictCache, Precond};
use crate::guidance::{DenoiserConfig, NoiseQuery, NoiseSchedule, ToyDenoiser};
use crate::layout::SceneLayout;
use crate::optim::{Adam, AdamConfig};
use crate::raster::{encode_condition, rasterize};
use crate::tensor::Tensor3;

/// A layout plus the cameras its training views are jittered from.
#[derive(Debug, Clone)]
pub struct PretrainScene {
    pub layout: SceneLayout,
    pub cameras: Vec<Camera>,
}

/// One view: encoded condition and a painter image per style, both at full resolution.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub condition: Tensor3,
    /// Signed `[-1, 1]` images indexed by style token.
    pub images: Vec<Tensor3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_val_loss: f64,
    pub val_loss: f64,
    /// Mean training loss over the last tenth of the steps.
    pub final_train_loss: f64,
    pub train_losses: Vec<f64>,
}

/// Painter samples for `views` jittered cameras per scene (the base cameras come first).
pub fn build_dataset(
    scenes: &[PretrainScene],
    painter: &PainterOracle,
    cfg: &PretrainConfig,
    den: &DenoiserConfig,
    sampler: &SamplerConfig,
    views: usize,
    stream: u64,
) -> Result<Vec<PretrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut out = Vec::new();
    for scene in scenes {
        let classes = scene.layout.class_count();
        if classes + 1 != den.condition_channels {
            return Err(Error::shape(
                format!("{} condition channels", den.condition_channels),
                format!("{} classes + inverse depth", classes),
            ));
        }
        let s = TrajectorySampler::new(scene.cameras.clone(), sampler.clone())?;
        for v in 0..views {
            let cam = if stream == 0 && v < s.base.len() {
                s.base[v].resized(cfg.resolution, cfg.resolution)
            } else {
                s.sample(cfg.resolution, &mut rng)
            };
            let maps = rasterize(&scene.layout, &cam);
            out.push(PretrainSample {
                condition: encode_condition(&maps, classes, cfg.resolution),
                images: (0..den.styles).map(|st| painter.paint(&maps, st).to_signed()).collect(),
            });
        }
    }
    Ok(out)
}

pub fn crop(t: &Tensor3, y0: usize, x0: usize, size: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(t.channels, size, size);
    for c in 0..t.channels {
        for y in 0..size {
            let src = t.index(c, y0 + y, x0);
            let dst = out.index(c, y, 0);
            out.data[dst..dst + size].copy_from_slice(&t.data[src..src + size]);
        }
    }
    out
}

fn step_loss(
    den: &ToyDenoiser,
    x0: &Tensor3,
    cond: Option<&Tensor3>,
    style: usize,
    t: usize,
    eps: &Tensor3,
    grad: Option<&mut crate::guidance::denoiser::DenoiserGrad>,
) -> Result<f64> {
    let x_t = den.schedule.perturb(x0, t, eps)?;
    let q = NoiseQuery { x_t: &x_t, t, condition: cond, style, camera: None };
    let Some(grad) = grad else {
        return noise_loss(&den.predict_with(&den.weights, &q, None, None)?, eps).map(|(l, _)| l);
    };
    let mut cache = PredictCache { precond: Precond::new(&den.schedule, t, den.config.sigma_data), net: Default::default() };
    let pred = den.predict_with(&den.weights, &q, None, Some(&mut cache))?;
    let (loss, dpred) = noise_loss(&pred, eps)?;
    den.backward_with(&den.weights, &cache, &dpred, grad);
    Ok(loss)
}

/// Conditional noise loss on fixed `(t, ε)` draws spread evenly over the schedule.
pub fn validation_loss(den: &ToyDenoiser, data: &[PretrainSample], seed: u64) -> Result<f64> {
    const LEVELS: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A11_DA7E);
    let (mut total, mut n) = (0.0, 0usize);
    for s in data {
        for (style, img) in s.images.iter().enumerate() {
            for k in 0..LEVELS {
                let t = ((k as f64 + 0.5) / LEVELS as f64 * den.schedule.steps as f64) as usize;
                let eps = Tensor3::randn(img.channels, img.height, img.width, &mut rng);
                total += step_loss(den, img, Some(&s.condition), style, t, &eps, None)?;
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Trains a fresh toy denoiser to predict noise on painter images of the
/// scenes' views. With `val_views == 0` validation reuses the training views.
pub fn pretrain_toy_denoiser(
    scenes: &[PretrainScene],
    painter: &PainterOracle,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    den_cfg: &DenoiserConfig,
    sampler: &SamplerConfig,
) -> Result<(ToyDenoiser, PretrainReport)> {
    if scenes.is_empty() || scenes.iter().any(|s| s.cameras.is_empty()) {
        return Err(Error::validation("pretraining needs at least one scene with cameras"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut den = ToyDenoiser::new(den_cfg.clone(), schedule.clone(), &mut rng)?;
    let train = build_dataset(scenes, painter, cfg, den_cfg, sampler, cfg.views_per_scene.max(1), 0)?;
    let val = if cfg.val_views == 0 { train.clone() } else { build_dataset(scenes, painter, cfg, den_cfg, sampler, cfg.val_views, 1)? };
    let initial_val_loss = validation_loss(&den, &val, cfg.seed)?;
    let crop_size = if cfg.crop == 0 { cfg.resolution } else { cfg.crop.min(cfg.resolution) };
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut train_losses = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        let mut grad = den.weights.zeros_like();
        let mut loss = 0.0;
        for _ in 0..batch {
            let s = &train[rng.gen_range(0..train.len())];
            let style = rng.gen_range(0..den_cfg.styles);
            let (y0, x0) = (rng.gen_range(0..=cfg.resolution - crop_size), rng.gen_range(0..=cfg.resolution - crop_size));
            let img = crop(&s.images[style], y0, x0, crop_size);
            let cond = crop(&s.condition, y0, x0, crop_size);
            let t = rng.gen_range(0..schedule.steps);
            let eps = Tensor3::randn(3, crop_size, crop_size, &mut rng);
            let drop = rng.gen::<f64>() < cfg.condition_dropout;
            loss += step_loss(&den, &img, (!drop).then_some(&cond), style, t, &eps, Some(&mut grad))?;
        }
        loss /= batch as f64;
        grad.scale(1.0 / batch as f64);
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite(format!("denoiser pretraining diverged at step {step} (loss {loss})")));
        }
        let gw = grad.groups();
        for ((name, p), (_, g)) in den.weights.groups_mut().into_iter().zip(gw) {
            opt.update(&format!("denoiser.{name}"), p, g);
        }
        train_losses.push(loss);
        if step % 500 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    let val_loss = validation_loss(&den, &val, cfg.seed)?;
    if !val_loss.is_finite() {
        return Err(Error::NonFinite("validation loss after pretraining".into()));
    }
    let tail = (cfg.steps / 10).max(1).min(train_losses.len().max(1));
    let final_train_loss = if train_losses.is_empty() {
        f64::NAN
    } else {
        train_losses[train_losses.len() - tail..].iter().sum::<f64>() / tail as f64
    };
    log::info!("pretrained denoiser: val noise loss {initial_val_loss:.4} -> {val_loss:.4}");
    Ok((den, PretrainReport { steps: cfg.steps, initial_val_loss, val_loss, final_train_loss, train_losses }))
}
