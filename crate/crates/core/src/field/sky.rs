//! Direction-only sky model: real spherical harmonics fed to a small MLP.

use rand::Rng;

use super::mlp::{sigmoid, Mlp, MlpCache, MlpGrad};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const MAX_SH_DEGREE: usize = 4;

/// Real spherical harmonics up to `degree` (inclusive), `(degree + 1)²` values.
pub fn sh_basis(degree: usize, d: &Vec3) -> Vec<f64> {
    assert!(degree <= MAX_SH_DEGREE, "spherical harmonics above degree 4 are not tabulated");
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let mut out = Vec::with_capacity((degree + 1) * (degree + 1));
    out.push(0.282_094_791_773_878_14);
    if degree >= 1 {
        out.extend([-0.488_602_511_902_919_9 * y, 0.488_602_511_902_919_9 * z, -0.488_602_511_902_919_9 * x]);
    }
    if degree >= 2 {
        out.extend([
            1.092_548_430_592_079_2 * x * y,
            -1.092_548_430_592_079_2 * y * z,
            0.946_174_695_757_560 * zz - 0.315_391_565_252_520_0,
            -1.092_548_430_592_079_2 * x * z,
            0.546_274_215_296_039_6 * (xx - yy),
        ]);
    }
    if degree >= 3 {
        out.extend([
            0.590_043_589_926_643_5 * y * (-3.0 * xx + yy),
            2.890_611_442_640_554 * x * y * z,
            0.457_045_799_464_465_7 * y * (1.0 - 5.0 * zz),
            0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0),
            0.457_045_799_464_465_7 * x * (1.0 - 5.0 * zz),
            1.445_305_721_320_277 * z * (xx - yy),
            0.590_043_589_926_643_5 * x * (-xx + 3.0 * yy),
        ]);
    }
    if degree >= 4 {
        out.extend([
            2.503_342_941_796_705 * x * y * (xx - yy),
            1.770_130_769_779_930_4 * y * z * (-3.0 * xx + yy),
            0.946_174_695_757_560 * x * y * (7.0 * zz - 1.0),
            0.669_046_543_557_289_2 * y * z * (3.0 - 7.0 * zz),
            -3.173_566_407_456_129_4 * zz + 3.702_494_142_032_150_7 * zz * zz + 0.317_356_640_745_612_9,
            0.669_046_543_557_289_2 * x * z * (3.0 - 7.0 * zz),
            0.473_087_347_878_780 * (xx - yy) * (7.0 * zz - 1.0),
            1.770_130_769_779_930_4 * x * z * (-xx + 3.0 * yy),
            0.625_835_735_449_176_1 * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy)),
        ]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkyModel {
    pub degree: usize,
    pub mlp: Mlp,
}

impl SkyModel {
    pub fn new<R: Rng + ?Sized>(degree: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut widths = vec![(degree + 1) * (degree + 1)];
        widths.extend(hidden);
        widths.push(3);
        Self {
            degree,
            mlp: Mlp::new(&widths, rng),
        }
    }

    fn check(d: &Vec3) -> Result<()> {
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "sky direction must be unit length (|d| = {})",
                d.norm()
            )));
        }
        Ok(())
    }

    pub fn color(&self, d: &Vec3) -> Result<[f64; 3]> {
        Self::check(d)?;
        let raw = self.mlp.forward(&sh_basis(self.degree, d));
        Ok([sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])])
    }

    /// Accumulates `∂L/∂θ_sky` given `∂L/∂rgb`.
    pub fn backward(&self, d: &Vec3, drgb: &[f64; 3], grad: &mut MlpGrad) -> Result<()> {
        Self::check(d)?;
        let mut cache = MlpCache::default();
        let raw = self.mlp.forward_cached(&sh_basis(self.degree, d), &mut cache);
        let dout: Vec<f64> = (0..3)
            .map(|i| {
                let s = sigmoid(raw[i]);
                drgb[i] * s * (1.0 - s)
            })
            .collect();
        self.mlp.backward(&cache, &dout, grad);
        Ok(())
    }
}
