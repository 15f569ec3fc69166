//! Layout-constrained ray sampling and volumetric compositing.
//!
//! Samples are segment starts: `δ_i` runs to the next sample, or to the end of
//! the interval for the last sample of an interval. The field is evaluated at
//! segment midpoints, which is also where ownership is decided.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldGrad, GridKey, RadianceField, SampleCache, SamplePoint, SceneField};
use crate::geometry::{merge_intervals, Interval, Ray};
use crate::layout::{resolve_owner, ClassId, InstanceId, LayoutInstance, SceneLayout, SKY_CLASS};
use crate::tensor::Tensor3;

/// Guard on the opacity used to normalise expected depth.
pub const DEPTH_EPS: f64 = 1e-6;

/// Pixels below this opacity render as sky in the semantic map.
pub const SKY_OPACITY: f64 = 0.5;

const GRAD_CHUNKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    /// Restrict samples to layout instance interiors; `false` samples all of `[near, far]`.
    pub constrained: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            near: 0.05,
            far: 200.0,
            constrained: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near >= 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::validation(format!(
                "sampling range [{}, {}] is empty",
                self.near, self.far
            )));
        }
        if self.samples_per_ray == 0 {
            return Err(Error::validation("samples_per_ray must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub t: f64,
    pub delta: f64,
    /// Owning layout instance at the segment midpoint, if any.
    pub instance: Option<InstanceId>,
    pub class: Option<ClassId>,
    pub is_object: bool,
}

impl RaySample {
    pub fn t_mid(&self) -> f64 {
        self.t + 0.5 * self.delta
    }

    pub fn grid(&self, ray: &Ray, cfg: &FieldConfig) -> GridKey {
        match self.instance {
            Some(id) if self.is_object => GridKey::Object(id),
            _ => GridKey::Stuff(cfg.tile_of(&ray.at(self.t_mid()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleSet {
    pub ray: Ray,
    pub intervals: Vec<Interval>,
    pub samples: Vec<RaySample>,
}

/// Splits `n` samples across intervals proportionally to length (largest remainder).
pub fn allocate_samples(intervals: &[Interval], n: usize) -> Vec<usize> {
    let total: f64 = intervals.iter().map(Interval::length).sum();
    if intervals.is_empty() || total <= 0.0 {
        return vec![0; intervals.len()];
    }
    let ideal: Vec<f64> = intervals.iter().map(|iv| n as f64 * iv.length() / total).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Owner among instances whose ray interval contains `t`.
fn owner_at<'a>(hits: &[(&'a LayoutInstance, Interval)], ray: &Ray, t: f64) -> Option<&'a LayoutInstance> {
    let p = ray.at(t);
    resolve_owner(hits.iter().filter(|(_, iv)| iv.contains(t)).map(|(i, _)| *i), &p)
}

fn stratify<R: Rng>(iv: &Interval, count: usize, rng: &mut R, out: &mut Vec<(f64, f64)>) {
    if count == 0 {
        return;
    }
    let w = iv.length() / count as f64;
    let start = out.len();
    out.push((iv.near, 0.0));
    for k in 1..count {
        out.push((iv.near + (k as f64 + rng.gen::<f64>()) * w, 0.0));
    }
    for i in start..out.len() {
        let next = if i + 1 < out.len() { out[i + 1].0 } else { iv.far };
        out[i].1 = next - out[i].0;
    }
}

/// Stratified samples within the merged instance intervals of `ray`, clipped to `[near, far]`.
pub fn sample_ray<R: Rng>(layout: &SceneLayout, ray: &Ray, cfg: &SamplingConfig, rng: &mut R) -> RaySampleSet {
    let hits: Vec<(&LayoutInstance, Interval)> = layout
        .instances
        .iter()
        .filter_map(|inst| inst.ray_interval(ray).map(|iv| (inst, iv)))
        .collect();
    let intervals = if cfg.constrained {
        merge_intervals(hits.iter().filter_map(|(_, iv)| iv.clip(cfg.near, cfg.far)).collect())
    } else {
        vec![Interval::new(cfg.near, cfg.far)]
    };
    let counts = allocate_samples(&intervals, cfg.samples_per_ray);
    let mut segs = Vec::with_capacity(cfg.samples_per_ray);
    for (iv, &c) in intervals.iter().zip(&counts) {
        stratify(iv, c, rng, &mut segs);
    }
    let samples = segs
        .into_iter()
        .map(|(t, delta)| {
            let mid = t + 0.5 * delta;
            let mut owner = owner_at(&hits, ray, mid);
            if owner.is_none() && cfg.constrained {
                // Round-off at an interval end: fall back to the closest interval.
                owner = hits
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.1.near - mid).max(mid - a.1.far).max(0.0);
                        let db = (b.1.near - mid).max(mid - b.1.far).max(0.0);
                        da.total_cmp(&db)
                    })
                    .map(|(i, _)| *i);
            }
            RaySample {
                t,
                delta,
                instance: owner.map(|i| i.id),
                class: owner.map(|i| i.class),
                is_object: owner.is_some_and(|i| i.is_object),
            }
        })
        .collect();
    RaySampleSet {
        ray: *ray,
        intervals,
        samples,
    }
}

/// Per-pixel random stream, independent of evaluation order.
pub fn pixel_rng(seed: u64, pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

/// Alpha compositing of `(σ_i, δ_i, c_i, t_i)` over a sky color.
pub fn composite(sigma: &[f64], delta: &[f64], color: &[[f64; 3]], t: &[f64], sky: [f64; 3]) -> Composite {
    let mut trans = 1.0f64;
    let mut out = [0.0; 3];
    let mut depth_acc = 0.0;
    let mut weights = Vec::with_capacity(sigma.len());
    for i in 0..sigma.len() {
        let tau = sigma[i] * delta[i];
        let alpha = -(-tau).exp_m1();
        let w = trans * alpha;
        trans *= (-tau).exp();
        for k in 0..3 {
            out[k] += w * color[i][k];
        }
        depth_acc += w * t[i];
        weights.push(w);
    }
    // Equal to Σ w_i up to round-off, but guaranteed to stay in [0, 1].
    let opacity = 1.0 - trans;
    for k in 0..3 {
        out[k] += (1.0 - opacity) * sky[k];
    }
    Composite {
        color: out,
        depth: depth_acc / opacity.max(DEPTH_EPS),
        opacity,
        weights,
    }
}

/// Gradients of [`composite`] outputs with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGrad {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub sky: [f64; 3],
}

pub fn composite_backward(
    sigma: &[f64],
    delta: &[f64],
    color: &[[f64; 3]],
    t: &[f64],
    sky: [f64; 3],
    dcolor: [f64; 3],
    ddepth: f64,
    dopacity: f64,
) -> CompositeGrad {
    let n = sigma.len();
    let fwd = composite(sigma, delta, color, t, sky);
    let o = fwd.opacity;
    // Depth = A / max(O, ε): chain its gradient into per-sample scalars.
    let (da, do_from_depth) = if o > DEPTH_EPS {
        (ddepth / o, -ddepth * fwd.depth / o)
    } else {
        (ddepth / DEPTH_EPS, 0.0)
    };
    let dsky_scalar: f64 = (0..3).map(|k| dcolor[k] * sky[k]).sum();
    let dopacity_total = dopacity + do_from_depth - dsky_scalar;
    // q_i: the derivative of the loss w.r.t. weight w_i.
    let q: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|k| dcolor[k] * color[i][k]).sum::<f64>() + da * t[i] + dopacity_total)
        .collect();
    // ∂w_i/∂σ_k = δ_k T_{k+1} for i = k, -δ_k w_i for i > k.
    let mut suffix = 0.0;
    let mut trans_next: Vec<f64> = Vec::with_capacity(n);
    let mut trans = 1.0f64;
    for i in 0..n {
        trans *= (-sigma[i] * delta[i]).exp();
        trans_next.push(trans);
    }
    let mut dsigma = vec![0.0; n];
    for k in (0..n).rev() {
        dsigma[k] = delta[k] * (trans_next[k] * q[k] - suffix);
        suffix += fwd.weights[k] * q[k];
    }
    let dcol = fwd.weights.iter().map(|&w| dcolor.map(|g| g * w)).collect();
    CompositeGrad {
        sigma: dsigma,
        color: dcol,
        sky: dcolor.map(|g| g * (1.0 - o)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderFrame {
    pub width: usize,
    pub height: usize,
    pub color: Tensor3,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub semantic: Vec<ClassId>,
}

struct PixelOut {
    color: [f64; 3],
    depth: f64,
    opacity: f64,
    semantic: ClassId,
}

fn evaluate_samples<F: RadianceField + ?Sized>(
    field: &F,
    set: &RaySampleSet,
    cfg: &FieldConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<[f64; 3]>, Vec<f64>)> {
    let n = set.samples.len();
    let (mut sig, mut del, mut col, mut ts) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for s in &set.samples {
        let sp = SamplePoint {
            ray: &set.ray,
            t: s.t_mid(),
            grid: s.grid(&set.ray, cfg),
            instance: s.instance,
        };
        let (sigma, c) = field.sample(&sp)?;
        sig.push(sigma);
        del.push(s.delta);
        col.push(c);
        ts.push(s.t_mid());
    }
    Ok((sig, del, col, ts))
}

fn render_pixel<F: RadianceField + ?Sized>(
    field: &F,
    field_cfg: &FieldConfig,
    layout: &SceneLayout,
    cam: &Camera,
    cfg: &SamplingConfig,
    seed: u64,
    pixel: usize,
) -> Result<PixelOut> {
    let ray = cam.ray(pixel % cam.width, pixel / cam.width);
    let mut rng = pixel_rng(seed, pixel);
    let set = sample_ray(layout, &ray, cfg, &mut rng);
    let (sig, del, col, ts) = evaluate_samples(field, &set, field_cfg)?;
    let sky = field.sky_color(&ray.direction)?;
    let comp = composite(&sig, &del, &col, &ts, sky);
    let mut per_class: Vec<(ClassId, f64)> = Vec::new();
    for (s, &w) in set.samples.iter().zip(&comp.weights) {
        if let Some(c) = s.class {
            match per_class.iter_mut().find(|(k, _)| *k == c) {
                Some(e) => e.1 += w,
                None => per_class.push((c, w)),
            }
        }
    }
    let semantic = if comp.opacity < SKY_OPACITY {
        SKY_CLASS
    } else {
        per_class
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|e| e.0)
            .unwrap_or(SKY_CLASS)
    };
    Ok(PixelOut {
        color: comp.color,
        depth: comp.depth,
        opacity: comp.opacity,
        semantic,
    })
}

/// Renders every pixel of `cam`. `field_cfg` supplies the stuff lattice used for grid lookup.
pub fn render_image<F: RadianceField + ?Sized>(
    field: &F,
    field_cfg: &FieldConfig,
    layout: &SceneLayout,
    cam: &Camera,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<RenderFrame> {
    cfg.validate()?;
    let pixels: Vec<PixelOut> = (0..cam.pixel_count())
        .into_par_iter()
        .map(|p| render_pixel(field, field_cfg, layout, cam, cfg, seed, p))
        .collect::<Result<_>>()?;
    let rgb: Vec<[f64; 3]> = pixels.iter().map(|p| p.color).collect();
    Ok(RenderFrame {
        width: cam.width,
        height: cam.height,
        color: Tensor3::from_rgb_pixels(cam.height, cam.width, &rgb),
        depth: pixels.iter().map(|p| p.depth).collect(),
        opacity: pixels.iter().map(|p| p.opacity).collect(),
        semantic: pixels.iter().map(|p| p.semantic).collect(),
    })
}

/// Every grid key the view's samples touch.
pub fn view_grids(field_cfg: &FieldConfig, layout: &SceneLayout, cam: &Camera, cfg: &SamplingConfig, seed: u64) -> BTreeSet<GridKey> {
    (0..cam.pixel_count())
        .into_par_iter()
        .map(|p| {
            let ray = cam.ray(p % cam.width, p / cam.width);
            let set = sample_ray(layout, &ray, cfg, &mut pixel_rng(seed, p));
            set.samples.iter().map(|s| s.grid(&ray, field_cfg)).collect::<BTreeSet<_>>()
        })
        .reduce(BTreeSet::new, |mut a, b| {
            a.extend(b);
            a
        })
}

/// Analytic field with density `sigma` inside layout instances and zero
/// elsewhere, coloured by class. Used to check the renderer against the rasterizer.
pub struct IndicatorField<'a> {
    pub layout: &'a SceneLayout,
    pub sigma: f64,
    pub sky: [f64; 3],
}

impl RadianceField for IndicatorField<'_> {
    fn sample(&self, s: &SamplePoint<'_>) -> Result<(f64, [f64; 3])> {
        Ok(match self.layout.owner_at(&s.ray.at(s.t)) {
            Some(inst) => {
                let c = self.layout.class(inst.class).map(|c| c.color).unwrap_or([255; 3]);
                (self.sigma, c.map(|v| v as f64 / 255.0))
            }
            None => (0.0, [0.0; 3]),
        })
    }

    fn sky_color(&self, _direction: &crate::geometry::Vec3) -> Result<[f64; 3]> {
        Ok(self.sky)
    }
}

impl SceneField {
    /// Spawns the stuff grids a view needs; must run before rendering it.
    pub fn prepare_view(&mut self, layout: &SceneLayout, cam: &Camera, cfg: &SamplingConfig, seed: u64) -> Result<Vec<GridKey>> {
        let keys = view_grids(&self.config, layout, cam, cfg, seed);
        self.spawn_missing(keys)
    }

    pub fn render(&self, layout: &SceneLayout, cam: &Camera, cfg: &SamplingConfig, seed: u64) -> Result<RenderFrame> {
        render_image(self, &self.config, layout, cam, cfg, seed)
    }
}

/// Upstream gradients of a loss with respect to a rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrad {
    pub color: Tensor3,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl FrameGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Tensor3::zeros(3, height, width),
            depth: vec![0.0; width * height],
            opacity: vec![0.0; width * height],
        }
    }

    pub fn add_assign(&mut self, other: &FrameGrad) -> Result<()> {
        self.color.add_assign_scaled(&other.color, 1.0)?;
        self.depth.iter_mut().zip(&other.depth).for_each(|(a, b)| *a += b);
        self.opacity.iter_mut().zip(&other.opacity).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

fn pixel_backward(
    field: &SceneField,
    layout: &SceneLayout,
    cam: &Camera,
    cfg: &SamplingConfig,
    seed: u64,
    pixel: usize,
    up: &FrameGrad,
    grad: &mut FieldGrad,
) -> Result<()> {
    let n_pix = cam.pixel_count();
    let dcolor = [up.color.data[pixel], up.color.data[n_pix + pixel], up.color.data[2 * n_pix + pixel]];
    let (ddepth, dopacity) = (up.depth[pixel], up.opacity[pixel]);
    if dcolor == [0.0; 3] && ddepth == 0.0 && dopacity == 0.0 {
        return Ok(());
    }
    let ray = cam.ray(pixel % cam.width, pixel / cam.width);
    let set = sample_ray(layout, &ray, cfg, &mut pixel_rng(seed, pixel));
    let n = set.samples.len();
    let mut caches = vec![SampleCache::default(); n];
    let (mut sig, mut del, mut col, mut ts) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut points = Vec::with_capacity(n);
    for (s, cache) in set.samples.iter().zip(caches.iter_mut()) {
        let sp = SamplePoint {
            ray: &set.ray,
            t: s.t_mid(),
            grid: s.grid(&set.ray, &field.config),
            instance: s.instance,
        };
        let (sigma, c) = field.query_cached(&sp, cache)?;
        sig.push(sigma);
        del.push(s.delta);
        col.push(c);
        ts.push(s.t_mid());
        points.push(sp);
    }
    let sky = field.sky.color(&ray.direction)?;
    let g = composite_backward(&sig, &del, &col, &ts, sky, dcolor, ddepth, dopacity);
    for i in 0..n {
        field.sample_backward(&points[i], &caches[i], g.sigma[i], &g.color[i], grad)?;
    }
    field.sky_backward(&ray.direction, &g.sky, grad)
}

/// Backpropagates frame gradients into field parameters. Re-samples rays with
/// the same seed, so it must match the forward render's configuration.
pub fn render_backward(
    field: &SceneField,
    layout: &SceneLayout,
    cam: &Camera,
    cfg: &SamplingConfig,
    seed: u64,
    up: &FrameGrad,
) -> Result<FieldGrad> {
    let n = cam.pixel_count();
    if up.color.shape() != (3, cam.height, cam.width) || up.depth.len() != n || up.opacity.len() != n {
        return Err(Error::shape(
            format!("frame gradient for {}x{}", cam.width, cam.height),
            format!("{:?}", up.color.shape()),
        ));
    }
    // Fixed chunking keeps the summation order independent of the thread count.
    let chunk = n.div_ceil(GRAD_CHUNKS).max(1);
    let partials: Vec<FieldGrad> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|pixels| {
            let mut grad = field.zero_grad();
            for &p in pixels {
                pixel_backward(field, layout, cam, cfg, seed, p, up, &mut grad)?;
            }
            Ok(grad)
        })
        .collect::<Result<_>>()?;
    let mut total = field.zero_grad();
    for g in &partials {
        total.add_assign(g);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::tests::tiny_config;
    use crate::geometry::Vec3;
    use crate::layout::{point_in_instance, urban_classes, Pose, Shape};

    fn cuboid(id: u32, class: ClassId, center: [f64; 3], size: [f64; 3]) -> LayoutInstance {
        LayoutInstance {
            id,
            class,
            shape: Shape::Cuboid,
            pose: Pose::axis_aligned(Vec3::from(center), Vec3::from(size)).unwrap(),
            is_object: class == 3,
        }
    }

    #[test]
    fn composite_closed_forms() {
        let c1 = [0.9, 0.2, 0.1];
        let c2 = [0.1, 0.7, 0.3];
        let sky = [0.3, 0.5, 0.8];
        let one = composite(&[20.0], &[1.0], &[c1], &[1.0], sky);
        assert!((0..3).all(|k| (one.color[k] - c1[k]).abs() < 1e-8));
        assert!((one.opacity - 1.0).abs() < 1e-8);
        let none = composite(&[0.0, 0.0], &[1.0, 1.0], &[c1, c2], &[1.0, 2.0], sky);
        assert_eq!(none.color, sky);
        assert_eq!(none.opacity, 0.0);
        let two = composite(&[std::f64::consts::LN_2, 20.0], &[1.0, 1.0], &[c1, c2], &[1.0, 2.0], sky);
        assert!((0..3).all(|k| (two.color[k] - (0.5 * c1[k] + 0.5 * c2[k])).abs() < 1e-6));
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 7;
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.5)).collect();
        let color: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let t: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.4).collect();
        let sky = [0.2, 0.4, 0.6];
        let (dc, dd, dop) = ([0.3, -0.7, 1.1], 0.25, -0.6);
        let loss = |s: &[f64], c: &[[f64; 3]], sk: [f64; 3]| {
            let r = composite(s, &delta, c, &t, sk);
            (0..3).map(|k| dc[k] * r.color[k]).sum::<f64>() + dd * r.depth + dop * r.opacity
        };
        let g = composite_backward(&sigma, &delta, &color, &t, sky, dc, dd, dop);
        let h = 1e-6;
        for i in 0..n {
            let (mut p, mut m) = (sigma.clone(), sigma.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, &color, sky) - loss(&m, &color, sky)) / (2.0 * h);
            assert!((fd - g.sigma[i]).abs() < 1e-6, "σ{i}: {fd} vs {}", g.sigma[i]);
            for k in 0..3 {
                let (mut p, mut m) = (color.clone(), color.clone());
                p[i][k] += h;
                m[i][k] -= h;
                let fd = (loss(&sigma, &p, sky) - loss(&sigma, &m, sky)) / (2.0 * h);
                assert!((fd - g.color[i][k]).abs() < 1e-6);
            }
        }
        for k in 0..3 {
            let (mut p, mut m) = (sky, sky);
            p[k] += h;
            m[k] -= h;
            let fd = (loss(&sigma, &color, p) - loss(&sigma, &color, m)) / (2.0 * h);
            assert!((fd - g.sky[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn sample_midpoints_lie_in_their_owners() {
        let layout = SceneLayout::new(
            urban_classes(),
            vec![cuboid(1, 4, [10.0, 0.0, 1.0], [2.0, 4.0, 4.0]), cuboid(2, 3, [16.0, 0.0, 1.0], [4.0, 4.0, 4.0])],
        )
        .unwrap();
        let ray = Ray::new(Vec3::new(0.0, 0.3, 1.2), Vec3::x());
        let set = sample_ray(&layout, &ray, &SamplingConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(set.samples.len(), 64);
        for s in &set.samples {
            let owner = layout.instance(s.instance.unwrap()).unwrap();
            assert!(point_in_instance(&ray.at(s.t_mid()), owner));
        }
        assert!(set.samples.windows(2).all(|w| w[0].t < w[1].t));
        // Lengths 2 and 4: counts 21/43 (±1 of 21.33/42.67).
        let first = set.samples.iter().filter(|s| s.instance == Some(1)).count();
        assert!((first as f64 - 64.0 / 3.0).abs() <= 1.0);
        let miss = sample_ray(&layout, &Ray::new(Vec3::zeros(), -Vec3::x()), &SamplingConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(miss.samples.is_empty());
    }

    #[test]
    fn interval_structure_matches_dense_ray_march() {
        let layout = SceneLayout::new(
            urban_classes(),
            vec![
                cuboid(1, 4, [8.0, 0.0, 1.0], [3.0, 4.0, 4.0]),
                cuboid(2, 4, [9.0, 0.0, 1.0], [3.0, 4.0, 4.0]),
                cuboid(3, 5, [20.0, 0.5, 1.0], [5.0, 4.0, 4.0]),
            ],
        )
        .unwrap();
        let ray = Ray::new(Vec3::new(0.0, 0.1, 0.9), Vec3::new(1.0, 0.01, 0.0).normalize());
        let set = sample_ray(&layout, &ray, &SamplingConfig::default(), &mut ChaCha8Rng::seed_from_u64(3));
        // Dense march: collect [enter, exit] runs of "inside any instance".
        let eps = 1e-4;
        let mut runs: Vec<(f64, f64)> = Vec::new();
        let mut inside = false;
        let mut t = 0.0;
        while t < 40.0 {
            let now = layout.instances.iter().any(|i| point_in_instance(&ray.at(t), i));
            if now && !inside {
                runs.push((t, t));
            }
            if now {
                runs.last_mut().unwrap().1 = t;
            }
            inside = now;
            t += eps;
        }
        assert_eq!(runs.len(), set.intervals.len());
        for (r, iv) in runs.iter().zip(&set.intervals) {
            assert!((r.0 - iv.near).abs() < 2.0 * eps && (r.1 - iv.far).abs() < 2.0 * eps);
        }
        let counts = allocate_samples(&set.intervals, 64);
        let total: f64 = set.intervals.iter().map(Interval::length).sum();
        for (c, iv) in counts.iter().zip(&set.intervals) {
            assert!((*c as f64 - 64.0 * iv.length() / total).abs() <= 1.0);
        }
    }

    #[test]
    fn empty_layout_renders_pure_sky() {
        let layout = SceneLayout::empty(urban_classes());
        let field = SceneField::new(tiny_config(), &layout).unwrap();
        let cam = Camera::look_at(6, 5, 1.0, Vec3::new(0.0, 0.0, 1.5), Vec3::new(10.0, 0.0, 1.5)).unwrap();
        let frame = field.render(&layout, &cam, &SamplingConfig::default(), 0).unwrap();
        assert!(frame.opacity.iter().all(|&o| o == 0.0));
        assert!(frame.semantic.iter().all(|&s| s == SKY_CLASS));
        let px = cam.ray(2, 3);
        let sky = field.sky.color(&px.direction).unwrap();
        let n = 30;
        assert_eq!([frame.color.data[3 * 6 + 2], frame.color.data[n + 3 * 6 + 2], frame.color.data[2 * n + 3 * 6 + 2]], sky);
    }

    #[test]
    fn render_backward_matches_finite_differences() {
        let layout = SceneLayout::new(
            urban_classes(),
            vec![cuboid(1, 4, [6.0, 0.0, 1.0], [2.0, 3.0, 3.0]), cuboid(2, 3, [4.0, -0.5, 0.5], [1.0, 1.0, 1.0])],
        )
        .unwrap();
        let mut field = SceneField::new(tiny_config(), &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cam = Camera::look_at(4, 4, 0.6, Vec3::new(0.0, 0.0, 1.0), Vec3::new(6.0, 0.0, 1.0)).unwrap();
        let cfg = SamplingConfig { samples_per_ray: 12, ..Default::default() };
        field.prepare_view(&layout, &cam, &cfg, 5).unwrap();
        for key in field.grid_keys() {
            let g = field.grid_mut(key).unwrap();
            g.encoding.table.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            g.decoder.layers[0].bias.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let mut up = FrameGrad::zeros(4, 4);
        up.color.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        up.depth.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        up.opacity.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let loss = |f: &SceneField| {
            let fr = f.render(&layout, &cam, &cfg, 5).unwrap();
            fr.color.data.iter().zip(&up.color.data).map(|(a, b)| a * b).sum::<f64>()
                + fr.depth.iter().zip(&up.depth).map(|(a, b)| a * b).sum::<f64>()
                + fr.opacity.iter().zip(&up.opacity).map(|(a, b)| a * b).sum::<f64>()
        };
        let grad = render_backward(&field, &layout, &cam, &cfg, 5, &up).unwrap();
        let h = 2f32.powi(-12);
        let mut checked = 0;
        for (key, g) in &grad.grids {
            let big: Vec<usize> = (0..g.table.len()).filter(|&k| g.table[k].abs() > 1e-3).take(4).collect();
            for k in big {
                let orig = field.grid(*key).unwrap().encoding.table[k];
                field.grid_mut(*key).unwrap().encoding.table[k] = orig + h;
                let lp = loss(&field);
                field.grid_mut(*key).unwrap().encoding.table[k] = orig - h;
                let lm = loss(&field);
                field.grid_mut(*key).unwrap().encoding.table[k] = orig;
                let fd = (lp - lm) / (2.0 * h as f64);
                assert!((fd - g.table[k]).abs() <= 1e-3 * g.table[k].abs(), "{key} {k}: {fd} vs {}", g.table[k]);
                checked += 1;
            }
        }
        assert!(checked >= 4);
    }
}
