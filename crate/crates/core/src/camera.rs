//! Pinhole cameras. Camera frame: `x` right, `y` down, `z` forward; the world
//! is `z`-up. Rays go through pixel centers and carry unit directions, so ray
//! parameters are metric distances.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mat3_from_row_major, mat3_to_row_major, nearest_rotation, orthonormality_error, Mat3, Ray, Vec3};
use crate::layout::ROTATION_TOLERANCE;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera rotation; columns are the camera axes in world coordinates.
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub position: Vec3,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        (fx, fy, cx, cy): (f64, f64, f64, f64),
        rotation: Mat3,
        position: Vec3,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            position,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("camera resolution must be non-zero"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::validation("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::validation(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("camera position is not finite"));
        }
        if orthonormality_error(&self.rotation) > ROTATION_TOLERANCE || self.rotation.determinant() < 0.0 {
            return Err(Error::validation("camera rotation is not a proper rotation"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target` with the image "up" aligned to world `z`.
    pub fn look_at(width: usize, height: usize, fov_x: f64, eye: Vec3, target: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::validation("look_at target coincides with the eye"))?;
        let right = forward
            .cross(&Vec3::z())
            .try_normalize(1e-9)
            .ok_or_else(|| Error::validation("look_at direction is vertical"))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            width,
            height,
            (fx, fx, 0.5 * width as f64, 0.5 * height as f64),
            rotation,
            eye,
        )
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            ..self.clone()
        }
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit ray through the center of pixel `(x, y)`.
    pub fn ray(&self, x: usize, y: usize) -> Ray {
        self.ray_at(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Unit ray through continuous image coordinates `(u, v)`.
    pub fn ray_at(&self, u: f64, v: f64) -> Ray {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray::new(self.position, (self.rotation * d_cam).normalize())
    }

    /// Flattened world-from-camera pose (row-major rotation then position).
    pub fn extrinsics(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        out[..9].copy_from_slice(&mat3_to_row_major(&self.rotation));
        out[9] = self.position.x;
        out[10] = self.position.y;
        out[11] = self.position.z;
        out
    }

    /// Projects a world point; `None` when behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let c = self.rotation.transpose() * (p - self.position);
        (c.z > 0.0).then(|| (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub position: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        Self {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: mat3_to_row_major(&c.rotation),
            position: [c.position.x, c.position.y, c.position.z],
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let rotation = mat3_from_row_major(&r.rotation);
        let err = orthonormality_error(&rotation);
        let rotation = if err > 0.0 && err <= ROTATION_TOLERANCE {
            nearest_rotation(&rotation)
        } else {
            rotation
        };
        Camera::new(r.width, r.height, (r.fx, r.fy, r.cx, r.cy), rotation, Vec3::from(r.position))
    }
}

pub fn parse_trajectory(text: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> = serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "trajectory".into(),
        message: e.to_string(),
    })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| Camera::try_from(r).map_err(|e| Error::validation(format!("camera {i}: {e}"))))
        .collect()
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text)
}

pub fn trajectory_to_json(cameras: &[Camera]) -> String {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("trajectory serialises")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_center_ray_hits_target() {
        let cam = Camera::look_at(64, 64, 1.0, Vec3::new(0.0, 0.0, 1.5), Vec3::new(10.0, 2.0, 1.0)).unwrap();
        let ray = cam.ray_at(cam.cx, cam.cy);
        let expected = (Vec3::new(10.0, 2.0, 1.0) - cam.position).normalize();
        assert!((ray.direction - expected).norm() < 1e-12);
        // Image y grows downwards: the top row looks up.
        assert!(cam.ray(32, 0).direction.z > cam.ray(32, 63).direction.z);
        // Image x grows to the right of the forward direction.
        assert!(cam.ray(63, 32).direction.y < cam.ray(0, 32).direction.y);
    }

    #[test]
    fn projection_inverts_rays() {
        let cam = Camera::look_at(40, 30, 1.2, Vec3::new(1.0, -2.0, 2.0), Vec3::new(5.0, 3.0, 0.0)).unwrap();
        let ray = cam.ray(7, 21);
        let (u, v) = cam.project(&ray.at(13.0)).unwrap();
        assert!((u - 7.5).abs() < 1e-9 && (v - 21.5).abs() < 1e-9);
    }

    #[test]
    fn trajectory_round_trip_and_validation() {
        let cam = Camera::look_at(16, 16, 1.0, Vec3::new(0.0, 0.0, 1.5), Vec3::new(10.0, 0.0, 1.5)).unwrap();
        let json = trajectory_to_json(&[cam.clone(), cam.resized(32, 32)]);
        let back = parse_trajectory(&json).unwrap();
        assert_eq!(back[0], cam);
        assert_eq!(back[1].fx, 2.0 * cam.fx);
        let bad = json.replacen("\"cx\": 8.0", "\"cx\": 80.0", 1);
        assert!(matches!(parse_trajectory(&bad), Err(Error::Validation(_))));
    }
}
