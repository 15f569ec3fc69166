use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use layoutforge::camera::{load_trajectory, Camera};
use layoutforge::field::checkpoint::{load_field, save_field};
use layoutforge::field::SceneField;
use layoutforge::geometry::{Aabb, Vec3};
use layoutforge::guidance::checkpoint::{load_denoiser, save_denoiser};
use layoutforge::guidance::NoiseSchedule;
use layoutforge::imageio::{write_pfm, write_rgb_png};
use layoutforge::layout::{layout_to_json, load_layout, SceneLayout};
use layoutforge::mesh::{default_threshold, extract_mesh, FieldDensity};
use layoutforge::raster::rasterize;
use layoutforge::train::{
    edit_scene, evaluate, load_edit_script, optimize_scene, pretrain_toy_denoiser, refine_scene, EvalReport, Guidance,
    MetricsLog, PretrainScene, RunContext, TrainConfig,
};

#[derive(Parser)]
#[command(name = "layoutforge", version, about = "Layout-conditioned 3D street scene synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Scene layout JSON.
    #[arg(long, global = true)]
    layout: Option<PathBuf>,
    /// Camera trajectory JSON.
    #[arg(long, global = true)]
    trajectory: Option<PathBuf>,
    /// Run configuration TOML; defaults to the toy preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Field checkpoint: written by `optimize`, read by the later stages.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Denoiser checkpoint; defaults to `<out-dir>/denoiser.bin`.
    #[arg(long, global = true)]
    denoiser: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sample the whole ray instead of layout interiors.
    #[arg(long, global = true)]
    no_layout_constraint: bool,
    /// Drop the layout condition during refinement.
    #[arg(long, global = true)]
    unconditional_refine: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Schema-check a layout (and a trajectory/config when given).
    Validate,
    /// Write semantic, depth and sky maps for every trajectory camera.
    Rasterize,
    /// Train the toy denoiser on painter renderings of the layout.
    Pretrain,
    /// Optimize a scene field under layout-guided distillation.
    Optimize,
    /// Run layout-aware refinement on an optimized field.
    Refine,
    /// Render frames along the trajectory.
    Render,
    /// Apply an edit script, fine-tuning where the edit needs it.
    Edit {
        #[arg(long)]
        script: PathBuf,
        /// Apply the edits without any fine-tuning.
        #[arg(long)]
        no_finetune: bool,
    },
    /// Export the field inside the layout as an OBJ mesh.
    Mesh {
        /// Voxel edge length in meters.
        #[arg(long, default_value_t = 0.25)]
        voxel: f64,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

/// A missing flag; reported like a clap usage error.
#[derive(Debug)]
struct Usage(&'static str);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} is required for this subcommand", self.0)
    }
}

impl std::error::Error for Usage {}

impl Common {
    fn layout(&self) -> Result<SceneLayout> {
        let path = self.layout.as_ref().ok_or(Usage("--layout"))?;
        Ok(load_layout(path)?)
    }

    fn trajectory(&self) -> Result<Vec<Camera>> {
        let path = self.trajectory.as_ref().ok_or(Usage("--trajectory"))?;
        let cams = load_trajectory(path)?;
        if cams.is_empty() {
            return Err(layoutforge::Error::validation("trajectory has no cameras").into());
        }
        Ok(cams)
    }

    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::toy(0),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.field.seed = seed;
        }
        if self.no_layout_constraint {
            cfg.sampling.constrained = false;
        }
        if self.unconditional_refine {
            cfg.refine.conditional = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }

    fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("field.bin"))
    }

    fn denoiser(&self) -> PathBuf {
        self.denoiser.clone().unwrap_or_else(|| self.out_dir.join("denoiser.bin"))
    }

    fn field(&self, layout: &SceneLayout) -> Result<SceneField> {
        let path = self.checkpoint();
        let mut field = load_field(&path).with_context(|| format!("loading field checkpoint {}", path.display()))?;
        field.sync_objects(layout)?;
        Ok(field)
    }

    fn context(&self, cfg: TrainConfig, cams: Vec<Camera>) -> Result<RunContext> {
        let mut ctx = RunContext::new(cfg, cams)?;
        ctx.metrics = MetricsLog::to_file(self.out("metrics.csv")?)?;
        Ok(ctx)
    }

    fn guidance(&self, cfg: &TrainConfig) -> Result<Guidance> {
        let path = self.denoiser();
        let base = load_denoiser(&path).with_context(|| format!("loading denoiser {} (run `pretrain` first)", path.display()))?;
        Ok(Guidance::new(Arc::new(base), cfg)?)
    }
}

fn report(phase: &str, r: &EvalReport) {
    println!(
        "{}",
        serde_json::json!({
            "phase": phase,
            "painter_distance": r.painter_distance,
            "semantic_agreement": r.semantic_agreement,
            "per_view": r.per_view,
        })
    );
}

fn held_out(field: &mut SceneField, layout: &SceneLayout, ctx: &RunContext) -> Result<EvalReport> {
    let cfg = &ctx.config;
    Ok(evaluate(field, layout, &ctx.eval_cameras, &cfg.sampling_at(cfg.fine_resolution), &cfg.painter, cfg.style)?)
}

/// Bounding box of every instance's corners, padded by one voxel.
fn layout_bounds(layout: &SceneLayout, pad: f64) -> Result<Aabb> {
    if layout.instances.is_empty() {
        bail!(layoutforge::Error::validation("layout has no instances to mesh"));
    }
    let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
    for inst in &layout.instances {
        for k in 0..8 {
            let c = Vec3::new([-0.5, 0.5][k & 1], [-0.5, 0.5][(k >> 1) & 1], [-0.5, 0.5][k >> 2]);
            let p = inst.pose.from_canonical(&c);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
    }
    Ok(Aabb::new(lo.add_scalar(-pad), hi.add_scalar(pad)))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Validate => {
            let layout = c.layout()?;
            let objects = layout.objects().count();
            println!("layout ok: {} instances ({objects} objects)", layout.instances.len());
            if c.trajectory.is_some() {
                println!("trajectory ok: {} cameras", c.trajectory()?.len());
            }
            if c.config.is_some() {
                c.config()?;
                println!("config ok");
            }
        }
        Command::Rasterize => {
            let layout = c.layout()?;
            let cams = c.trajectory()?;
            c.out("")?;
            for (i, cam) in cams.iter().enumerate() {
                rasterize(&layout, cam).save(&c.out_dir, &format!("view_{i:03}"), &layout)?;
            }
            println!("wrote condition maps for {} views to {}", cams.len(), c.out_dir.display());
        }
        Command::Pretrain => {
            let cfg = c.config()?;
            let scenes = [PretrainScene { layout: c.layout()?, cameras: c.trajectory()? }];
            let (den, rep) =
                pretrain_toy_denoiser(&scenes, &cfg.painter, &NoiseSchedule::default(), &cfg.pretrain, &cfg.denoiser, &cfg.sampler)?;
            let path = c.denoiser();
            c.out("")?;
            save_denoiser(&den, &path)?;
            println!(
                "pretrained {} steps: validation noise loss {:.4} -> {:.4}; wrote {}",
                rep.steps,
                rep.initial_val_loss,
                rep.val_loss,
                path.display()
            );
        }
        Command::Optimize => {
            let cfg = c.config()?;
            let layout = c.layout()?;
            let mut guidance = c.guidance(&cfg)?;
            let mut ctx = c.context(cfg.clone(), c.trajectory()?)?;
            let path = c.checkpoint();
            c.out("")?;
            ctx.checkpoint = Some(path.clone());
            let mut field = SceneField::new(cfg.field.clone(), &layout)?;
            optimize_scene(&layout, &mut field, &mut guidance, &mut ctx)?;
            save_field(&field, &path)?;
            report("optimize", &held_out(&mut field, &layout, &ctx)?);
        }
        Command::Refine => {
            let cfg = c.config()?;
            let layout = c.layout()?;
            let mut field = c.field(&layout)?;
            let guidance = c.guidance(&cfg)?;
            let mut ctx = c.context(cfg, c.trajectory()?)?;
            let path = c.out("field_refined.bin")?;
            ctx.checkpoint = Some(path.clone());
            refine_scene(&layout, &mut field, &guidance, &mut ctx)?;
            save_field(&field, &path)?;
            report("refine", &held_out(&mut field, &layout, &ctx)?);
        }
        Command::Render => {
            let cfg = c.config()?;
            let layout = c.layout()?;
            let mut field = c.field(&layout)?;
            let sampling = cfg.sampling_at(cfg.fine_resolution);
            let cams = c.trajectory()?;
            for (i, cam) in cams.iter().enumerate() {
                let cam = cam.resized(cfg.fine_resolution, cfg.fine_resolution);
                let seed = cfg.seed.wrapping_add(i as u64);
                field.prepare_view(&layout, &cam, &sampling, seed)?;
                let frame = field.render(&layout, &cam, &sampling, seed)?;
                write_rgb_png(c.out(&format!("frame_{i:03}.png"))?, &frame.color)?;
                write_pfm(c.out(&format!("frame_{i:03}_depth.pfm"))?, frame.width, frame.height, &frame.depth)?;
            }
            println!("rendered {} frames to {}", cams.len(), c.out_dir.display());
        }
        Command::Edit { script, no_finetune } => {
            let cfg = c.config()?;
            let mut layout = c.layout()?;
            let mut field = c.field(&layout)?;
            let edits = load_edit_script(script)?;
            if *no_finetune {
                for e in &edits {
                    layout = layoutforge::train::apply_edit(&mut field, &layout, e)?.0;
                }
            } else {
                let mut guidance = c.guidance(&cfg)?;
                let mut ctx = c.context(cfg, c.trajectory()?)?;
                for e in &edits {
                    layout = edit_scene(&mut field, &layout, e, &mut guidance, &mut ctx)?;
                }
            }
            save_field(&field, c.out("field_edited.bin")?)?;
            std::fs::write(c.out("layout_edited.json")?, layout_to_json(&layout)).context("writing edited layout")?;
            println!("applied {} edits; wrote {}", edits.len(), c.out_dir.display());
        }
        Command::Mesh { voxel, threshold } => {
            if !(voxel.is_finite() && *voxel > 0.0) {
                bail!(layoutforge::Error::validation("--voxel must be positive"));
            }
            let layout = c.layout()?;
            let field = c.field(&layout)?;
            let region = layout_bounds(&layout, *voxel)?;
            let src = FieldDensity { field: &field, layout: &layout };
            let mesh = extract_mesh(&src, &region, *voxel, threshold.unwrap_or_else(default_threshold))?;
            let path = c.out("scene.obj")?;
            mesh.save_obj(&path)?;
            println!("wrote {} vertices, {} triangles to {}", mesh.vertices.len(), mesh.triangles.len(), path.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use layoutforge::Error as E;
    if err.is::<Usage>() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::Parse { .. } | E::Validation(_) | E::UnknownInstance(_) | E::DuplicateInstance(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAYOUTFORGE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
