use std::collections::BTreeSet;
use std::sync::Arc;

use layoutforge::camera::Camera;
use layoutforge::field::{FieldGrad, GridKey, Mlp, MlpGrad, SceneField};
use layoutforge::guidance::{jitter_adapter, AdaptedDenoiser, AdapterConfig, DenoiserConfig, NoiseQuery, NoiseSchedule, ToyDenoiser};
use layoutforge::layout::SceneLayout;
use layoutforge::losses::refine_mse;
use layoutforge::raster::{encode_condition, rasterize};
use layoutforge::render::{render_backward, FrameGrad, RenderFrame, SamplingConfig};
use layoutforge::tensor::Tensor3;
use layoutforge::train::{toy_field_config, toy_layout, toy_trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const RES: usize = 16;
const TOL: f64 = 1e-3;
/// Exactly representable in f32 around unit-scale parameters.
const H: f32 = 1.0 / 4096.0;

#[derive(Debug, Clone, Copy)]
enum Param {
    Table(GridKey),
    Weight(GridKey, usize),
    Bias(GridKey, usize),
    SkyWeight(usize),
    SkyBias(usize),
}

impl Param {
    fn class(&self) -> &'static str {
        let obj = |k: &GridKey| matches!(k, GridKey::Object(_));
        match self {
            Param::Table(k) if obj(k) => "object table",
            Param::Table(_) => "stuff table",
            Param::Weight(k, _) if obj(k) => "object decoder weight",
            Param::Weight(..) => "stuff decoder weight",
            Param::Bias(k, _) if obj(k) => "object decoder bias",
            Param::Bias(..) => "stuff decoder bias",
            Param::SkyWeight(_) => "sky weight",
            Param::SkyBias(_) => "sky bias",
        }
    }

    fn values<'a>(&self, f: &'a mut SceneField) -> &'a mut Vec<f32> {
        match *self {
            Param::Table(k) => &mut f.grid_mut(k).unwrap().encoding.table,
            Param::Weight(k, l) => &mut f.grid_mut(k).unwrap().decoder.layers[l].weight,
            Param::Bias(k, l) => &mut f.grid_mut(k).unwrap().decoder.layers[l].bias,
            Param::SkyWeight(l) => &mut f.sky.mlp.layers[l].weight,
            Param::SkyBias(l) => &mut f.sky.mlp.layers[l].bias,
        }
    }

    fn grad<'a>(&self, g: &'a FieldGrad) -> &'a [f64] {
        match *self {
            Param::Table(k) => &g.grids[&k].table,
            Param::Weight(k, l) => &g.grids[&k].decoder.weight[l],
            Param::Bias(k, l) => &g.grids[&k].decoder.bias[l],
            Param::SkyWeight(l) => &g.sky.weight[l],
            Param::SkyBias(l) => &g.sky.bias[l],
        }
    }
}

fn params_of(g: &FieldGrad) -> Vec<Param> {
    let mlp = |m: &MlpGrad, w: &dyn Fn(usize) -> Param, b: &dyn Fn(usize) -> Param| {
        (0..m.weight.len()).flat_map(|l| [w(l), b(l)]).collect::<Vec<_>>()
    };
    let mut out = Vec::new();
    for (k, gg) in &g.grids {
        let k = *k;
        out.push(Param::Table(k));
        out.extend(mlp(&gg.decoder, &move |l| Param::Weight(k, l), &move |l| Param::Bias(k, l)));
    }
    out.extend(mlp(&g.sky, &Param::SkyWeight, &Param::SkyBias));
    out
}

/// Worst relative error over the `per_class` largest-gradient entries of every
/// parameter group; also returns the parameter classes that were exercised.
fn fd_field(
    field: &mut SceneField,
    grad: &FieldGrad,
    per_group: usize,
    loss: &dyn Fn(&SceneField) -> f64,
) -> (f64, BTreeSet<&'static str>, usize) {
    let mut worst = 0.0f64;
    let mut classes = BTreeSet::new();
    let mut checked = 0;
    for p in params_of(grad) {
        let g = p.grad(grad);
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax < 1e-8 {
            continue;
        }
        let mut idx: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= 1e-3 * gmax).collect();
        idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        for &i in idx.iter().take(per_group) {
            let orig = p.values(field)[i];
            let (up, down) = (orig + H, orig - H);
            p.values(field)[i] = up;
            let lp = loss(field);
            p.values(field)[i] = down;
            let lm = loss(field);
            p.values(field)[i] = orig;
            let fd = (lp - lm) / (up as f64 - down as f64);
            worst = worst.max((fd - g[i]).abs() / g[i].abs());
            checked += 1;
        }
        classes.insert(p.class());
    }
    (worst, classes, checked)
}

fn randomize_mlp(m: &mut Mlp, rng: &mut ChaCha8Rng) {
    for l in &mut m.layers {
        l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
}

struct Scene {
    layout: SceneLayout,
    cam: Camera,
    sampling: SamplingConfig,
    field: SceneField,
}

const SEED: u64 = 11;

fn scene() -> Scene {
    let layout = toy_layout();
    let cam = toy_trajectory(RES)[1].clone();
    let sampling = SamplingConfig { samples_per_ray: 16, near: 0.05, far: 45.0, constrained: true };
    let mut cfg = toy_field_config(5);
    cfg.grid.table_size = 1 << 10;
    let mut field = SceneField::new(cfg, &layout).unwrap();
    field.prepare_view(&layout, &cam, &sampling, SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for key in field.grid_keys() {
        let g = field.grid_mut(key).unwrap();
        g.encoding.table.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        randomize_mlp(&mut g.decoder, &mut rng);
    }
    randomize_mlp(&mut field.sky.mlp, &mut rng);
    Scene { layout, cam, sampling, field }
}

impl Scene {
    fn render(&self, f: &SceneField) -> RenderFrame {
        f.render(&self.layout, &self.cam, &self.sampling, SEED).unwrap()
    }

    fn backward(&self, up: &FrameGrad) -> FieldGrad {
        render_backward(&self.field, &self.layout, &self.cam, &self.sampling, SEED, up).unwrap()
    }
}

/// A rendered pixel's color, depth and opacity under random upstream weights.
fn pixel_part(s: &mut Scene) -> (f64, BTreeSet<&'static str>, usize) {
    let maps = rasterize(&s.layout, &s.cam);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut pixels: Vec<usize> = [1u8, 3, 4].iter().filter_map(|c| maps.semantic.iter().position(|s| s == c)).collect();
    pixels.extend(maps.sky.iter().position(|&s| s));
    let (mut worst, mut classes, mut checked) = (0.0f64, BTreeSet::new(), 0);
    for p in pixels {
        let n = RES * RES;
        let mut up = FrameGrad::zeros(RES, RES);
        let u: [f64; 5] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        for c in 0..3 {
            up.color.data[c * n + p] = u[c];
        }
        up.depth[p] = 0.1 * u[3];
        up.opacity[p] = u[4];
        let grad = s.backward(&up);
        let sc = &*s;
        let loss = |f: &SceneField| {
            let r = sc.render(f);
            (0..3).map(|c| u[c] * r.color.data[c * n + p]).sum::<f64>() + up.depth[p] * r.depth[p] + u[4] * r.opacity[p]
        };
        let mut field = s.field.clone();
        let (w, cl, k) = fd_field(&mut field, &grad, 3, &loss);
        worst = worst.max(w);
        classes.extend(cl);
        checked += k;
    }
    (worst, classes, checked)
}

fn refine_part(s: &mut Scene) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let target = Tensor3::from_vec(3, RES, RES, (0..3 * RES * RES).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let frame = s.render(&s.field);
    let (_, dcolor) = refine_mse(&frame.color, &target).unwrap();
    let mut up = FrameGrad::zeros(RES, RES);
    up.color = dcolor;
    let grad = s.backward(&up);
    let sc = &*s;
    let loss = |f: &SceneField| refine_mse(&sc.render(f).color, &target).unwrap().0;
    let mut field = s.field.clone();
    let (w, _, k) = fd_field(&mut field, &grad, 2, &loss);
    (w, k)
}

fn adapter_part() -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let base = Arc::new(ToyDenoiser::new(DenoiserConfig::default(), NoiseSchedule::default(), &mut rng).unwrap());
    let mut adapted = AdaptedDenoiser::new(base, AdapterConfig::default(), &mut rng);
    jitter_adapter(&mut adapted, 0.05, &mut rng);
    let layout = toy_layout();
    let cam = toy_trajectory(RES)[2].clone();
    let cond = encode_condition(&rasterize(&layout, &cam), layout.class_count(), RES);
    let x_t = Tensor3::randn(3, RES, RES, &mut rng);
    let eps = Tensor3::randn(3, RES, RES, &mut rng);
    let extr = cam.extrinsics();
    let q = NoiseQuery { x_t: &x_t, t: 300, condition: Some(&cond), style: 1, camera: Some(&extr) };
    let (_, grad) = adapted.loss_and_grad(&q, &eps).unwrap();
    let params = adapted.params().clone();
    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0);
    for (gi, (_, g)) in grad.groups().into_iter().enumerate() {
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax < 1e-10 {
            continue;
        }
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        for &i in idx.iter().take(3) {
            let mut eval = |d: f64| {
                let mut p = params.clone();
                p.groups_mut()[gi].1[i] += d;
                adapted.set_params(p);
                adapted.loss_and_grad(&q, &eps).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / g[i].abs());
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn check() -> Outcome {
    let mut s = scene();
    let (wa, classes, na) = pixel_part(&mut s);
    let required = [
        "stuff table",
        "stuff decoder weight",
        "stuff decoder bias",
        "object table",
        "object decoder weight",
        "object decoder bias",
        "sky weight",
        "sky bias",
    ];
    let missing: Vec<_> = required.iter().filter(|c| !classes.contains(*c)).collect();
    let (wb, nb) = adapter_part();
    let (wc, nc) = refine_part(&mut s);
    Outcome::new(
        wa < TOL && wb < TOL && wc < TOL && missing.is_empty() && nb > 0,
        format!(
            "max rel err: pixel {wa:.2e} ({na} entries, {} classes), adapter {wb:.2e} ({nb}), refine_mse {wc:.2e} ({nc}){}",
            classes.len(),
            if missing.is_empty() { String::new() } else { format!("; classes never exercised: {missing:?}") }
        ),
    )
}
