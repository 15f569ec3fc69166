//! Training-camera sampling and the synthetic monocular-depth provider.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::yaw;
use crate::raster::ConditionMaps;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Uniform yaw jitter half-range, degrees.
    pub yaw_range_deg: f64,
    /// Uniform horizontal position jitter half-range, meters.
    pub position_jitter: f64,
    /// Cameras never go below this height above the ground plane `z = 0`.
    pub min_height: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { yaw_range_deg: 45.0, position_jitter: 1.0, min_height: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectorySampler {
    pub base: Vec<Camera>,
    pub config: SamplerConfig,
}

impl TrajectorySampler {
    pub fn new(base: Vec<Camera>, config: SamplerConfig) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::validation("trajectory needs at least one camera"));
        }
        if !(config.yaw_range_deg >= 0.0 && config.position_jitter >= 0.0) {
            return Err(Error::validation("sampler ranges must be non-negative"));
        }
        Ok(Self { base, config })
    }

    /// Base camera `index` rotated by `yaw_deg` about the world vertical.
    pub fn shifted(&self, index: usize, yaw_deg: f64, offset: [f64; 3], res: usize) -> Camera {
        let b = &self.base[index % self.base.len()];
        let mut cam = b.resized(res, res);
        cam.rotation = yaw(yaw_deg.to_radians()) * b.rotation;
        cam.position += crate::geometry::Vec3::from(offset);
        cam.position.z = cam.position.z.max(self.config.min_height);
        cam
    }

    pub fn sample<R: Rng + ?Sized>(&self, res: usize, rng: &mut R) -> Camera {
        let i = rng.gen_range(0..self.base.len());
        let c = &self.config;
        let yaw_deg = if c.yaw_range_deg > 0.0 { rng.gen_range(-c.yaw_range_deg..=c.yaw_range_deg) } else { 0.0 };
        let j = c.position_jitter;
        let offset = if j > 0.0 {
            [rng.gen_range(-j..=j), rng.gen_range(-j..=j), rng.gen_range(-0.25 * j..=0.25 * j)]
        } else {
            [0.0; 3]
        };
        self.shifted(i, yaw_deg, offset, res)
    }
}

/// Monocular depth estimate for a view, in unknown affine units; 0 where invalid.
pub trait MonoDepthProvider {
    fn predict(&self, maps: &ConditionMaps, view: u64) -> Vec<f64>;
}

/// Layout depth under a hidden affine map plus multiplicative noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMonoDepth {
    pub scale: f64,
    pub shift: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticMonoDepth {
    pub fn new(seed: u64, noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD3E9_7A11);
        Self { scale: rng.gen_range(0.5..2.0), shift: rng.gen_range(-2.0..2.0), noise, seed }
    }
}

impl MonoDepthProvider for SyntheticMonoDepth {
    fn predict(&self, maps: &ConditionMaps, view: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(view);
        maps.depth
            .iter()
            .zip(&maps.sky)
            .map(|(&d, &sky)| {
                let n: f64 = rng.sample(StandardNormal);
                if sky {
                    0.0
                } else {
                    self.scale * d * (1.0 + self.noise * n) + self.shift
                }
            })
            .collect()
    }
}
