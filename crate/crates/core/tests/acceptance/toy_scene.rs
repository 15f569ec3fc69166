use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;
use std::time::Instant;

use layoutforge::field::SceneField;
use layoutforge::guidance::{NoiseSchedule, ToyDenoiser};
use layoutforge::layout::SceneLayout;
use layoutforge::train::{
    evaluate, optimize_scene, pretrain_toy_denoiser, refine_scene, toy_layout, toy_trajectory, EvalReport, Guidance,
    PretrainScene, RunContext, TrainConfig,
};

use crate::Outcome;

const SEEDS: [u64; 3] = [0, 1, 2];
const BUDGET_SECS: f64 = 30.0 * 60.0;

/// Second half of a full run that shares its optimization with the
/// unconditional-refine ablation.
struct PendingUnconditional {
    field: SceneField,
    ctx: RunContext,
    guidance: Guidance,
}

struct FullRun {
    report: EvalReport,
    field: SceneField,
    pending: Option<PendingUnconditional>,
}

#[derive(Default)]
struct State {
    denoiser: Option<Arc<ToyDenoiser>>,
    pretrain_secs: f64,
    full: BTreeMap<u64, FullRun>,
}

#[derive(Clone)]
pub struct ToyRuns {
    state: Rc<RefCell<State>>,
    layout: SceneLayout,
}

fn eval(field: &mut SceneField, layout: &SceneLayout, ctx: &RunContext) -> EvalReport {
    let cfg = &ctx.config;
    evaluate(field, layout, &ctx.eval_cameras, &cfg.sampling_at(cfg.fine_resolution), &cfg.painter, cfg.style).unwrap()
}

impl ToyRuns {
    pub fn new() -> Self {
        Self { state: Rc::default(), layout: toy_layout() }
    }

    fn denoiser(&self) -> Arc<ToyDenoiser> {
        let mut st = self.state.borrow_mut();
        if st.denoiser.is_none() {
            let cfg = TrainConfig::toy(0);
            let scenes = [PretrainScene { layout: self.layout.clone(), cameras: toy_trajectory(cfg.fine_resolution) }];
            let start = Instant::now();
            let (den, report) =
                pretrain_toy_denoiser(&scenes, &cfg.painter, &NoiseSchedule::default(), &cfg.pretrain, &cfg.denoiser, &cfg.sampler)
                    .unwrap();
            st.pretrain_secs = start.elapsed().as_secs_f64();
            println!(
                "  pretrained denoiser in {:.0}s: val noise loss {:.4} -> {:.4}",
                st.pretrain_secs, report.initial_val_loss, report.val_loss
            );
            st.denoiser = Some(Arc::new(den));
        }
        st.denoiser.clone().unwrap()
    }

    fn full(&self, seed: u64) {
        if self.state.borrow().full.contains_key(&seed) {
            return;
        }
        let base = self.denoiser();
        let cfg = TrainConfig::toy(seed);
        let mut field = SceneField::new(cfg.field.clone(), &self.layout).unwrap();
        let mut guidance = Guidance::new(base, &cfg).unwrap();
        let mut ctx = RunContext::new(cfg.clone(), toy_trajectory(cfg.fine_resolution)).unwrap();
        optimize_scene(&self.layout, &mut field, &mut guidance, &mut ctx).unwrap();
        let mut uncond_cfg = cfg.clone();
        uncond_cfg.refine.conditional = false;
        let pending = PendingUnconditional { field: field.clone(), ctx: ctx.fork(uncond_cfg).unwrap(), guidance };
        refine_scene(&self.layout, &mut field, &pending.guidance, &mut ctx).unwrap();
        let report = eval(&mut field, &self.layout, &ctx);
        self.state.borrow_mut().full.insert(seed, FullRun { report, field, pending: Some(pending) });
    }

    fn unconditional(&self, seed: u64) -> EvalReport {
        self.full(seed);
        let mut p = self.state.borrow_mut().full.get_mut(&seed).unwrap().pending.take().unwrap();
        refine_scene(&self.layout, &mut p.field, &p.guidance, &mut p.ctx).unwrap();
        eval(&mut p.field, &self.layout, &p.ctx)
    }

    fn unconstrained(&self, seed: u64) -> EvalReport {
        let base = self.denoiser();
        let mut cfg = TrainConfig::toy(seed);
        cfg.sampling.constrained = false;
        let mut field = SceneField::new(cfg.field.clone(), &self.layout).unwrap();
        let mut guidance = Guidance::new(base, &cfg).unwrap();
        let mut ctx = RunContext::new(cfg.clone(), toy_trajectory(cfg.fine_resolution)).unwrap();
        optimize_scene(&self.layout, &mut field, &mut guidance, &mut ctx).unwrap();
        refine_scene(&self.layout, &mut field, &guidance, &mut ctx).unwrap();
        eval(&mut field, &self.layout, &ctx)
    }

    pub fn convergence(&self) -> Outcome {
        let start = Instant::now();
        self.full(0);
        let st = self.state.borrow();
        let total = start.elapsed().as_secs_f64();
        let d = st.full[&0].report.painter_distance;
        Outcome::new(
            d < 0.15 && total <= BUDGET_SECS,
            format!(
                "painter distance {d:.4} on 8 held-out views (threshold 0.15); {total:.0}s including {:.0}s pretraining, budget {BUDGET_SECS:.0}s",
                st.pretrain_secs
            ),
        )
    }

    pub fn off_trajectory(&self) -> Outcome {
        self.full(0);
        let cfg = TrainConfig::toy(0);
        let ctx = RunContext::new(cfg.clone(), toy_trajectory(cfg.fine_resolution)).unwrap();
        let cams: Vec<_> = (0..ctx.sampler.base.len())
            .flat_map(|i| [-45.0, 45.0].map(|y| ctx.sampler.shifted(i, y, [0.0; 3], cfg.fine_resolution)))
            .collect();
        let mut field = self.state.borrow().full[&0].field.clone();
        let r = evaluate(&mut field, &self.layout, &cams, &cfg.sampling_at(cfg.fine_resolution), &cfg.painter, cfg.style).unwrap();
        Outcome::new(
            r.semantic_agreement >= 0.9,
            format!("semantic agreement {:.3} over {} views at ±45° yaw (threshold 0.90)", r.semantic_agreement, cams.len()),
        )
    }

    pub fn ablations(&self) -> Outcome {
        let mut ok = true;
        let mut rows = Vec::new();
        for seed in SEEDS {
            self.full(seed);
            let full = self.state.borrow().full[&seed].report.painter_distance;
            let unconstrained = self.unconstrained(seed).painter_distance;
            let uncond = self.unconditional(seed).painter_distance;
            println!("  seed {seed}: full {full:.4}, no layout constraint {unconstrained:.4}, unconditional refine {uncond:.4}");
            ok &= unconstrained > full && uncond > full;
            rows.push(format!("seed {seed} {full:.4}/{unconstrained:.4}/{uncond:.4}"));
        }
        Outcome::new(ok, format!("painter distance full/unconstrained/unconditional: {}", rows.join(", ")))
    }
}
