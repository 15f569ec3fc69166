//! Multi-resolution spatial-hash feature encoding with trilinear interpolation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    pub table_size: usize,
    pub features_per_level: usize,
    /// Hidden layer widths of the density/color decoder.
    pub hidden: Vec<usize>,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            base_resolution: 16,
            per_level_scale: 1.5,
            table_size: 1 << 16,
            features_per_level: 2,
            hidden: vec![64],
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::validation("hash grid needs at least one level"));
        }
        if !self.table_size.is_power_of_two() || self.table_size > 1 << 30 {
            return Err(Error::validation(format!(
                "table size {} is not a power of two",
                self.table_size
            )));
        }
        if self.base_resolution == 0 || self.features_per_level == 0 {
            return Err(Error::validation("resolution and features must be positive"));
        }
        if !(self.per_level_scale.is_finite() && self.per_level_scale >= 1.0) {
            return Err(Error::validation("per-level scale must be >= 1"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::validation("hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn resolution(&self, level: usize) -> u32 {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as u32
    }

    pub fn decoder_widths(&self, outputs: usize) -> Vec<usize> {
        let mut w = vec![self.feature_width()];
        w.extend(&self.hidden);
        w.push(outputs);
        w
    }
}

#[inline]
pub fn spatial_hash(x: u32, y: u32, z: u32, table_size: usize) -> usize {
    let h = x.wrapping_mul(PRIMES[0]) ^ y.wrapping_mul(PRIMES[1]) ^ z.wrapping_mul(PRIMES[2]);
    (h as usize) & (table_size - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashEncoding {
    pub levels: usize,
    pub features: usize,
    pub table_size: usize,
    pub resolutions: Vec<u32>,
    /// `[level][entry][feature]`, flattened.
    pub table: Vec<f32>,
}

/// The eight interpolation corners of one level: table offsets and weights.
#[derive(Debug, Clone, Copy, Default)]
pub struct LevelCorners {
    pub offset: [usize; 8],
    pub weight: [f64; 8],
}

impl HashEncoding {
    pub fn new<R: Rng + ?Sized>(cfg: &HashGridConfig, rng: &mut R) -> Self {
        let n = cfg.levels * cfg.table_size * cfg.features_per_level;
        Self {
            levels: cfg.levels,
            features: cfg.features_per_level,
            table_size: cfg.table_size,
            resolutions: (0..cfg.levels).map(|l| cfg.resolution(l)).collect(),
            table: (0..n).map(|_| rng.gen_range(-1e-4f32..=1e-4)).collect(),
        }
    }

    pub fn output_width(&self) -> usize {
        self.levels * self.features
    }

    /// Corner offsets (into `table`) and trilinear weights at one level.
    #[inline]
    pub fn corners(&self, level: usize, p: &[f64; 3]) -> LevelCorners {
        let res = self.resolutions[level] as f64;
        let mut base = [0u32; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let x = p[a] * res;
            let f = x.floor();
            base[a] = f as u32;
            frac[a] = x - f;
        }
        let level_offset = level * self.table_size * self.features;
        let mut out = LevelCorners::default();
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let idx = spatial_hash(base[0] + dx as u32, base[1] + dy as u32, base[2] + dz as u32, self.table_size);
            out.offset[c] = level_offset + idx * self.features;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            out.weight[c] = wx * wy * wz;
        }
        out
    }

    /// Concatenated per-level features at `p ∈ [0,1]³`.
    pub fn encode(&self, p: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_width()];
        for l in 0..self.levels {
            let corners = self.corners(l, p);
            for c in 0..8 {
                let w = corners.weight[c];
                for f in 0..self.features {
                    out[l * self.features + f] += w * self.table[corners.offset[c] + f] as f64;
                }
            }
        }
        out
    }

    /// Scatters a feature gradient into a table-shaped gradient buffer.
    pub fn backward(&self, p: &[f64; 3], dfeat: &[f64], grad_table: &mut [f64]) {
        for l in 0..self.levels {
            let corners = self.corners(l, p);
            for c in 0..8 {
                let w = corners.weight[c];
                for f in 0..self.features {
                    grad_table[corners.offset[c] + f] += w * dfeat[l * self.features + f];
                }
            }
        }
    }
}
