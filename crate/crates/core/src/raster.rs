//! Per-view semantic, depth and sky maps rasterized from a layout, and their
//! encoding into denoiser condition channels.

use std::path::Path;

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::Result;
use crate::imageio::{write_gray_png, write_indexed_png, write_palette, write_pfm};
use crate::layout::{ClassId, LayoutInstance, SceneLayout, SKY_CLASS};
use crate::tensor::Tensor3;

/// Default normalisation of the inverse-depth channel: `1/d` is divided by
/// this and clamped, so everything nearer than 2 m saturates.
pub const DEFAULT_MAX_INVERSE_DEPTH: f64 = 0.5;

/// Smallest reported depth; keeps `0` free as the sky sentinel when the
/// camera itself sits inside an instance.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMaps {
    pub width: usize,
    pub height: usize,
    pub semantic: Vec<ClassId>,
    /// Metric distance to the nearest surface; `0` on sky pixels.
    pub depth: Vec<f64>,
    pub sky: Vec<bool>,
}

impl ConditionMaps {
    pub fn all_sky(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            semantic: vec![SKY_CLASS; n],
            depth: vec![0.0; n],
            sky: vec![true; n],
        }
    }

    pub fn check_invariants(&self) -> bool {
        (0..self.width * self.height).all(|i| {
            let sky = self.sky[i];
            sky == (self.semantic[i] == SKY_CLASS) && sky == !(self.depth[i] > 0.0 && self.depth[i].is_finite())
        })
    }

    pub fn sky_fraction(&self) -> f64 {
        self.sky.iter().filter(|&&s| s).count() as f64 / self.sky.len().max(1) as f64
    }

    /// Writes `<stem>_semantic.png` (+ `.json` palette), `<stem>_depth.pfm`, `<stem>_sky.png`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, layout: &SceneLayout) -> Result<()> {
        let dir = dir.as_ref();
        write_indexed_png(
            dir.join(format!("{stem}_semantic.png")),
            self.width,
            self.height,
            &self.semantic,
            &layout.classes,
        )?;
        write_palette(dir.join(format!("{stem}_semantic.json")), &layout.classes)?;
        write_pfm(dir.join(format!("{stem}_depth.pfm")), self.width, self.height, &self.depth)?;
        let sky: Vec<u8> = self.sky.iter().map(|&s| if s { 255 } else { 0 }).collect();
        write_gray_png(dir.join(format!("{stem}_sky.png")), self.width, self.height, &sky)
    }
}

/// Nearest entry among all instances hit by a ray, ties broken like point ownership
/// (objects first, then lower id).
pub fn nearest_hit<'a>(instances: &'a [LayoutInstance], ray: &crate::geometry::Ray) -> Option<(&'a LayoutInstance, f64)> {
    let mut best: Option<(&LayoutInstance, f64)> = None;
    for inst in instances {
        let Some(iv) = inst.ray_interval(ray) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((b, t)) => {
                iv.near < t || (iv.near == t && (inst.is_object, std::cmp::Reverse(inst.id)) > (b.is_object, std::cmp::Reverse(b.id)))
            }
        };
        if better {
            best = Some((inst, iv.near));
        }
    }
    best
}

pub fn rasterize(layout: &SceneLayout, cam: &Camera) -> ConditionMaps {
    let (w, h) = (cam.width, cam.height);
    let hits: Vec<(ClassId, f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = cam.ray(i % w, i / w);
            match nearest_hit(&layout.instances, &ray) {
                Some((inst, t)) => (inst.class, (t * ray.direction.norm()).max(MIN_DEPTH)),
                None => (SKY_CLASS, 0.0),
            }
        })
        .collect();
    ConditionMaps {
        width: w,
        height: h,
        semantic: hits.iter().map(|h| h.0).collect(),
        depth: hits.iter().map(|h| h.1).collect(),
        sky: hits.iter().map(|h| h.0 == SKY_CLASS).collect(),
    }
}

/// Area-averaging weights mapping `n` source cells onto `m` target cells.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n as f64 / m as f64;
    (0..m)
        .map(|j| {
            let (lo, hi) = (j as f64 * ratio, (j + 1) as f64 * ratio);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Box-filter resampling of an `h × w` plane to `out_h × out_w`.
pub fn area_resample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    let mut rows = vec![0.0; out_h * w];
    for (oy, ws) in wy.iter().enumerate() {
        for &(y, a) in ws {
            for x in 0..w {
                rows[oy * w + x] += a * src[y * w + x];
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        for (ox, ws) in wx.iter().enumerate() {
            out[oy * out_w + ox] = ws.iter().map(|&(x, a)| a * rows[oy * w + x]).sum();
        }
    }
    out
}

/// Output size for a target resolution: `target_res` rows, width keeping the aspect ratio.
pub fn encoded_size(maps: &ConditionMaps, target_res: usize) -> (usize, usize) {
    let out_w = ((maps.width as f64 * target_res as f64 / maps.height as f64).round() as usize).max(1);
    (target_res, out_w)
}

pub fn encode_condition(maps: &ConditionMaps, class_count: usize, target_res: usize) -> Tensor3 {
    encode_condition_with(maps, class_count, target_res, DEFAULT_MAX_INVERSE_DEPTH)
}

/// One-hot class channels followed by a normalised inverse-depth channel,
/// all area-averaged to the target resolution.
pub fn encode_condition_with(maps: &ConditionMaps, class_count: usize, target_res: usize, max_inverse_depth: f64) -> Tensor3 {
    let (h, w) = (maps.height, maps.width);
    let (out_h, out_w) = encoded_size(maps, target_res);
    let mut out = Tensor3::zeros(class_count + 1, out_h, out_w);
    let mut plane = vec![0.0; h * w];
    for c in 0..class_count {
        for (v, &s) in plane.iter_mut().zip(&maps.semantic) {
            *v = if s as usize == c { 1.0 } else { 0.0 };
        }
        out.channel_mut(c).copy_from_slice(&area_resample(&plane, h, w, out_h, out_w));
    }
    for i in 0..h * w {
        plane[i] = if maps.sky[i] {
            0.0
        } else {
            (1.0 / maps.depth[i] / max_inverse_depth).clamp(0.0, 1.0)
        };
    }
    out.channel_mut(class_count).copy_from_slice(&area_resample(&plane, h, w, out_h, out_w));
    out
}
