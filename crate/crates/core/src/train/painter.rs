//! Deterministic condition-maps → image oracle defining the toy target distribution.

use serde::{Deserialize, Serialize};

use crate::guidance::StyleToken;
use crate::raster::ConditionMaps;
use crate::tensor::Tensor3;

pub const STYLE_NAMES: [&str; 3] = ["day", "night", "snow"];

pub fn style_by_name(name: &str) -> Option<StyleToken> {
    STYLE_NAMES.iter().position(|s| s.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PainterOracle {
    pub seed: u64,
    /// Peak amplitude of the procedural texture.
    pub texture_amplitude: f64,
    /// Texture lattice cells across the image width.
    pub texture_cells: usize,
}

impl Default for PainterOracle {
    fn default() -> Self {
        Self { seed: 7, texture_amplitude: 0.03, texture_cells: 8 }
    }
}

fn hash01(mut x: u64) -> f64 {
    x = (x ^ (x >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x = (x ^ (x >> 33)).wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    x ^= x >> 33;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn day_color(class: u8) -> [f64; 3] {
    match class {
        0 => [0.55, 0.72, 0.92],
        1 => [0.32, 0.32, 0.35],
        2 => [0.62, 0.58, 0.52],
        3 => [0.78, 0.16, 0.12],
        4 => [0.72, 0.60, 0.44],
        5 => [0.22, 0.52, 0.20],
        c => [0, 1, 2].map(|k| 0.2 + 0.6 * hash01(c as u64 * 3 + k)),
    }
}

/// Base colour of a class under a style.
pub fn class_color(class: u8, style: StyleToken) -> [f64; 3] {
    let d = day_color(class);
    match (style, class) {
        (1, 0) => [0.04, 0.05, 0.14],
        (1, _) => [d[0] * 0.35, d[1] * 0.35, d[2] * 0.45 + 0.05],
        (2, 0) => [0.78, 0.80, 0.84],
        (2, 3) => [d[0] * 0.8 + 0.1, d[1] * 0.8 + 0.1, d[2] * 0.8 + 0.1],
        (2, _) => [0.6 * d[0] + 0.38, 0.6 * d[1] + 0.38, 0.6 * d[2] + 0.4],
        _ => d,
    }
}

impl PainterOracle {
    /// Smooth value noise in `[-1, 1]` over normalised image coordinates.
    fn texture(&self, u: f64, v: f64) -> f64 {
        let n = self.texture_cells.max(1) as f64;
        let (x, y) = (u * n, v * n);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (smooth(fx), smooth(fy));
        let lattice = |i: f64, j: f64| {
            let key = self.seed.wrapping_mul(0x9E37_79B9) ^ ((i as i64 as u64) << 32) ^ (j as i64 as u64 & 0xFFFF_FFFF);
            2.0 * hash01(key) - 1.0
        };
        let top = lattice(x0, y0) * (1.0 - sx) + lattice(x0 + 1.0, y0) * sx;
        let bottom = lattice(x0, y0 + 1.0) * (1.0 - sx) + lattice(x0 + 1.0, y0 + 1.0) * sx;
        top * (1.0 - sy) + bottom * sy
    }

    /// RGB image in `[0, 1]`: class colour × depth shading + texture; sky is flat.
    pub fn paint(&self, maps: &ConditionMaps, style: StyleToken) -> Tensor3 {
        let (w, h) = (maps.width, maps.height);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let base = class_color(maps.semantic[i], style);
                if maps.sky[i] {
                    pixels.push(base);
                    continue;
                }
                let shade = 0.75 + 0.25 * (-maps.depth[i] / 30.0).exp();
                let tex = self.texture_amplitude * self.texture((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                pixels.push(base.map(|c| (c * shade + tex).clamp(0.0, 1.0)));
            }
        }
        Tensor3::from_rgb_pixels(h, w, &pixels)
    }
}

/// Mean absolute per-channel difference between two images.
pub fn painter_distance(a: &Tensor3, b: &Tensor3) -> crate::Result<f64> {
    a.mean_abs_diff(b)
}
