//! Scene optimization with layout-guided distillation, layout-aware
//! refinement, and held-out evaluation against the painter.

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::metrics::{MetricsLog, StepMetrics};
use super::painter::PainterOracle;
use super::sampler::{MonoDepthProvider, SyntheticMonoDepth, TrajectorySampler};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::checkpoint::save_field;
use crate::field::{FieldGrad, Mlp, MlpGrad, SceneField};
use crate::guidance::{
    adapter_step, generate, lg_vsd_gradient, resample_refine, AdaptedDenoiser, AdapterSample, NoiseSchedule, RefineMode,
    ToyDenoiser,
};
use crate::layout::SceneLayout;
use crate::losses::{depth_loss, feature_consistency_loss, refine_mse, sky_loss, FeatureEncoder};
use crate::optim::{Adam, AdamConfig};
use crate::raster::{encode_condition, rasterize, ConditionMaps};
use crate::render::{render_backward, FrameGrad, RenderFrame, SamplingConfig};
use crate::tensor::Tensor3;

/// Frozen base denoiser, its camera-aware adapter, and the feature encoder.
pub struct Guidance {
    pub base: Arc<ToyDenoiser>,
    pub adapted: AdaptedDenoiser,
    /// Base schedule restricted to the configured distillation timestep range.
    pub schedule: NoiseSchedule,
    pub encoder: FeatureEncoder,
    adapter_opt: Adam,
}

impl Guidance {
    pub fn new(base: Arc<ToyDenoiser>, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xADA9_7E55);
        let adapted = AdaptedDenoiser::new(base.clone(), cfg.adapter.clone(), &mut rng);
        let mut schedule = base.schedule.clone();
        schedule.t_range = (cfg.t_range[0], cfg.t_range[1]);
        schedule.validate()?;
        Ok(Self {
            base,
            adapted,
            schedule,
            encoder: FeatureEncoder::rgb(cfg.seed ^ 0xFEA7),
            adapter_opt: Adam::new(AdamConfig { lr: cfg.adapter_lr, ..AdamConfig::default() }),
        })
    }
}

/// Everything a training phase needs besides the field, layout and guidance.
pub struct RunContext {
    pub config: TrainConfig,
    pub sampler: TrajectorySampler,
    pub mono: Box<dyn MonoDepthProvider + Send + Sync>,
    pub eval_cameras: Vec<Camera>,
    pub metrics: MetricsLog,
    /// Field checkpoint path, rewritten atomically.
    pub checkpoint: Option<PathBuf>,
    phases_run: u64,
}

impl RunContext {
    pub fn new(config: TrainConfig, trajectory: Vec<Camera>) -> Result<Self> {
        config.validate()?;
        let sampler = TrajectorySampler::new(trajectory, config.sampler.clone())?;
        let eval_cameras = eval_cameras(&sampler, config.eval_views, config.fine_resolution, config.seed);
        let mono = Box::new(SyntheticMonoDepth::new(config.seed, config.mono_noise));
        Ok(Self { config, sampler, mono, eval_cameras, metrics: MetricsLog::in_memory(), checkpoint: None, phases_run: 0 })
    }

    /// A context with another configuration that continues this one's RNG
    /// streams, so an ablation can branch off a shared prefix of the run.
    pub fn fork(&self, config: TrainConfig) -> Result<Self> {
        let mut other = Self::new(config, self.sampler.base.clone())?;
        other.phases_run = self.phases_run;
        other.eval_cameras = self.eval_cameras.clone();
        Ok(other)
    }

    fn phase_rng(&mut self) -> ChaCha8Rng {
        self.phases_run += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.phases_run);
        rng
    }

    fn save(&self, field: &SceneField) -> Result<()> {
        match &self.checkpoint {
            Some(path) => save_field(field, path),
            None => Ok(()),
        }
    }
}

/// Held-out cameras from a stream disjoint from every training phase.
pub fn eval_cameras(sampler: &TrajectorySampler, n: usize, res: usize, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1_5EED);
    rng.set_stream(u64::MAX);
    (0..n).map(|_| sampler.sample(res, &mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean per-pixel `|render − painter(rasterize(·))|` over all views.
    pub painter_distance: f64,
    /// Fraction of non-sky raster pixels whose rendered class matches.
    pub semantic_agreement: f64,
    pub per_view: Vec<f64>,
}

/// Renders `cams` (spawning any stuff grids they need) and compares with the painter.
pub fn evaluate(
    field: &mut SceneField,
    layout: &SceneLayout,
    cams: &[Camera],
    sampling: &SamplingConfig,
    painter: &PainterOracle,
    style: usize,
) -> Result<EvalReport> {
    let (mut agree, mut total) = (0usize, 0usize);
    let mut per_view = Vec::with_capacity(cams.len());
    for (i, cam) in cams.iter().enumerate() {
        let seed = 0xE7A1 + i as u64;
        field.prepare_view(layout, cam, sampling, seed)?;
        let frame = field.render(layout, cam, sampling, seed)?;
        let maps = rasterize(layout, cam);
        per_view.push(frame.color.mean_abs_diff(&painter.paint(&maps, style))?);
        for (p, &sky) in maps.sky.iter().enumerate() {
            if !sky {
                total += 1;
                agree += usize::from(frame.semantic[p] == maps.semantic[p]);
            }
        }
    }
    let painter_distance = if per_view.is_empty() { 0.0 } else { per_view.iter().sum::<f64>() / per_view.len() as f64 };
    let semantic_agreement = if total == 0 { 1.0 } else { agree as f64 / total as f64 };
    Ok(EvalReport { painter_distance, semantic_agreement, per_view })
}

fn update_mlp(opt: &mut Adam, prefix: &str, mlp: &mut Mlp, g: &MlpGrad) {
    for (i, layer) in mlp.layers.iter_mut().enumerate() {
        opt.update(&format!("{prefix}.l{i}.w"), &mut layer.weight, &g.weight[i]);
        opt.update(&format!("{prefix}.l{i}.b"), &mut layer.bias, &g.bias[i]);
    }
}

/// Adam step on every grid the gradient touches, plus the sky.
pub fn apply_field_update(field: &mut SceneField, grad: &FieldGrad, opt: &mut Adam) -> Result<()> {
    for (key, g) in &grad.grids {
        let grid = field.grid_mut(*key).ok_or_else(|| Error::MissingGrid(key.to_string()))?;
        opt.update(&format!("{key}.table"), &mut grid.encoding.table, &g.table);
        update_mlp(opt, &key.to_string(), &mut grid.decoder, &g.decoder);
    }
    update_mlp(opt, "sky", &mut field.sky.mlp, &grad.sky);
    Ok(())
}

/// A sampled training view: camera, layout maps, encoded condition and the render.
struct View {
    cam: Camera,
    maps: ConditionMaps,
    cond: Tensor3,
    seed: u64,
    sampling: SamplingConfig,
    frame: RenderFrame,
}

fn sample_view(layout: &SceneLayout, field: &mut SceneField, ctx: &RunContext, res: usize, rng: &mut ChaCha8Rng) -> Result<View> {
    let cam = ctx.sampler.sample(res, rng);
    let maps = rasterize(layout, &cam);
    let cond = encode_condition(&maps, layout.class_count(), res);
    let seed: u64 = rng.gen();
    let sampling = ctx.config.sampling_at(res);
    field.prepare_view(layout, &cam, &sampling, seed)?;
    let frame = field.render(layout, &cam, &sampling, seed)?;
    Ok(View { cam, maps, cond, seed, sampling, frame })
}

/// Adds the depth and sky terms shared by both phases; returns their losses.
fn add_geometry_losses(view: &View, ctx: &RunContext, step_id: u64, grad: &mut FrameGrad) -> Result<(f64, f64)> {
    let w = &ctx.config.weights;
    let mut depth = 0.0;
    if w.depth > 0.0 {
        let valid: Vec<bool> = view.maps.sky.iter().map(|s| !s).collect();
        let mono = ctx.mono.predict(&view.maps, step_id);
        match depth_loss(&mono, &view.frame.depth, &valid) {
            Ok((l, g)) => {
                depth = l;
                grad.depth.iter_mut().zip(&g).for_each(|(a, b)| *a += w.depth * b);
            }
            // Sky-only or flat views carry no depth signal.
            Err(Error::DegenerateAlignment(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let mut sky = 0.0;
    if w.sky > 0.0 {
        let (l, g) = sky_loss(&view.frame.opacity, &view.maps.sky)?;
        sky = l;
        grad.opacity.iter_mut().zip(&g).for_each(|(a, b)| *a += w.sky * b);
    }
    Ok((depth, sky))
}

/// Backward, clip, guard and update. Writes the last good checkpoint before failing.
fn field_step(
    layout: &SceneLayout,
    field: &mut SceneField,
    ctx: &RunContext,
    view: &View,
    grad: &FrameGrad,
    opt: &mut Adam,
    metrics: &mut StepMetrics,
) -> Result<()> {
    let losses = [metrics.lg_vsd, metrics.feature, metrics.depth, metrics.sky, metrics.refine];
    let frame_finite = grad.color.all_finite() && grad.depth.iter().chain(&grad.opacity).all(|v| v.is_finite());
    if !losses.iter().all(|l| l.is_finite()) || !frame_finite {
        ctx.save(field)?;
        return Err(Error::NonFinite(format!("{} step {}: losses {losses:?}", metrics.phase, metrics.step)));
    }
    let mut fg = render_backward(field, layout, &view.cam, &view.sampling, view.seed, grad)?;
    if !fg.all_finite() {
        ctx.save(field)?;
        return Err(Error::NonFinite(format!("{} step {}: field gradient", metrics.phase, metrics.step)));
    }
    metrics.grad_norm = fg.clip_global_norm(ctx.config.clip_norm);
    apply_field_update(field, &fg, opt)
}

fn record(
    field: &mut SceneField,
    layout: &SceneLayout,
    ctx: &mut RunContext,
    mut row: StepMetrics,
    last: bool,
) -> Result<()> {
    let every = ctx.config.checkpoint_every;
    if (every > 0 && (row.step + 1) % every == 0) || last {
        let sampling = ctx.config.sampling_at(ctx.config.fine_resolution);
        let cams = ctx.eval_cameras.clone();
        let eval = evaluate(field, layout, &cams, &sampling, &ctx.config.painter, ctx.config.style)?;
        row.painter_distance = Some(eval.painter_distance);
        log::info!("{} step {}: painter distance {:.4}, semantic agreement {:.3}", row.phase, row.step, eval.painter_distance, eval.semantic_agreement);
        ctx.save(field)?;
    }
    ctx.metrics.push(row)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub steps: usize,
    pub final_painter_distance: Option<f64>,
}

fn optimize_phase(
    layout: &SceneLayout,
    field: &mut SceneField,
    guidance: &mut Guidance,
    ctx: &mut RunContext,
    res: usize,
    steps: usize,
    phase: &str,
) -> Result<()> {
    let mut rng = ctx.phase_rng();
    let mut opt = Adam::new(AdamConfig { lr: ctx.config.lr, ..AdamConfig::default() });
    let style = ctx.config.style;
    for step in 0..steps {
        let w = ctx.config.weights.clone();
        let view = sample_view(layout, field, ctx, res, &mut rng)?;
        let ext = view.cam.extrinsics();
        let x0 = view.frame.color.to_signed();
        let mut grad = FrameGrad::zeros(res, res);
        let mut row = StepMetrics { phase: phase.to_string(), step, ..Default::default() };
        if w.lg_vsd > 0.0 {
            let g = lg_vsd_gradient(&x0, &*guidance.base, &guidance.adapted, &guidance.schedule, &view.cond, &ext, style, &mut rng)?;
            row.lg_vsd = g.mean_abs();
            // Mean over pixels, chained through the [-1, 1] conversion.
            grad.color.add_assign_scaled(&g, w.lg_vsd * 2.0 / g.len() as f64)?;
        }
        if w.feature > 0.0 && ctx.config.feature_steps > 0 {
            let generated = generate(x0.shape(), Some(&view.cond), style, &*guidance.base, ctx.config.feature_steps, RefineMode::Deterministic, &mut rng)?;
            let (l, d) = feature_consistency_loss(&view.frame.color, &generated.to_unit(), &guidance.encoder)?;
            row.feature = l;
            grad.color.add_assign_scaled(&d, w.feature)?;
        }
        let step_id = rng.gen();
        (row.depth, row.sky) = add_geometry_losses(&view, ctx, step_id, &mut grad)?;
        field_step(layout, field, ctx, &view, &grad, &mut opt, &mut row)?;
        if step % ctx.config.adapter_every == 0 {
            let sample = AdapterSample { x0: &x0, camera: &ext, condition: Some(&view.cond) };
            row.adapter = adapter_step(&mut guidance.adapted, &[sample], style, &guidance.schedule, &mut guidance.adapter_opt, &mut rng)?;
        }
        record(field, layout, ctx, row, step + 1 == steps)?;
    }
    Ok(())
}

/// Layout-guided distillation: `coarse_steps` at the coarse resolution, then
/// `fine_steps` at the fine one. A no-op when every optimize weight is zero.
pub fn optimize_scene(layout: &SceneLayout, field: &mut SceneField, guidance: &mut Guidance, ctx: &mut RunContext) -> Result<PhaseReport> {
    let w = &ctx.config.weights;
    let before = ctx.metrics.rows.len();
    if [w.lg_vsd, w.feature, w.depth, w.sky].iter().all(|&v| v == 0.0) {
        return Ok(PhaseReport { steps: 0, final_painter_distance: None });
    }
    let (coarse, fine) = (ctx.config.coarse_steps, ctx.config.fine_steps);
    optimize_phase(layout, field, guidance, ctx, ctx.config.coarse_resolution, coarse, "optimize_coarse")?;
    optimize_phase(layout, field, guidance, ctx, ctx.config.fine_resolution, fine, "optimize_fine")?;
    Ok(phase_report(ctx, before))
}

fn phase_report(ctx: &RunContext, before: usize) -> PhaseReport {
    let rows = &ctx.metrics.rows[before..];
    PhaseReport { steps: rows.len(), final_painter_distance: rows.iter().rev().find_map(|r| r.painter_distance) }
}

/// Perturb-then-denoise targets `I_f` for renders `I_r`, distilled back with MSE
/// (plus depth and sky terms) at the fine resolution.
pub fn refine_scene(layout: &SceneLayout, field: &mut SceneField, guidance: &Guidance, ctx: &mut RunContext) -> Result<PhaseReport> {
    let before = ctx.metrics.rows.len();
    let cfg = ctx.config.clone();
    let t0 = (cfg.refine.t0_fraction * guidance.base.schedule.steps as f64).round() as usize;
    let w = &cfg.weights;
    if !((w.refine > 0.0 && t0 > 0) || w.depth > 0.0 || w.sky > 0.0) {
        return Ok(PhaseReport { steps: 0, final_painter_distance: None });
    }
    let mut rng = ctx.phase_rng();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let res = cfg.fine_resolution;
    for step in 0..cfg.refine_steps {
        let view = sample_view(layout, field, ctx, res, &mut rng)?;
        let mut grad = FrameGrad::zeros(res, res);
        let mut row = StepMetrics { phase: "refine".into(), step, ..Default::default() };
        if w.refine > 0.0 && t0 > 0 {
            let cond = cfg.refine.conditional.then_some(&view.cond);
            let target = resample_refine(&view.frame.color.to_signed(), cond, cfg.style, &*guidance.base, t0, cfg.refine.steps, cfg.refine.mode, &mut rng)?;
            let (l, d) = refine_mse(&view.frame.color, &target.to_unit())?;
            row.refine = l;
            grad.color.add_assign_scaled(&d, w.refine)?;
        }
        let step_id = rng.gen();
        (row.depth, row.sky) = add_geometry_losses(&view, ctx, step_id, &mut grad)?;
        field_step(layout, field, ctx, &view, &grad, &mut opt, &mut row)?;
        record(field, layout, ctx, row, step + 1 == cfg.refine_steps)?;
    }
    Ok(phase_report(ctx, before))
}
