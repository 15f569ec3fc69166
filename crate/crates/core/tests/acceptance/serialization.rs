use layoutforge::field::checkpoint::{field_from_bytes, field_to_bytes, load_field, save_field};
use layoutforge::field::SceneField;
use layoutforge::geometry::{Aabb, Vec3};
use layoutforge::guidance::checkpoint::{denoiser_from_bytes, denoiser_to_bytes, load_denoiser, save_denoiser};
use layoutforge::guidance::{DenoiserConfig, NoiseSchedule, ToyDenoiser};
use layoutforge::losses::depth_align;
use layoutforge::mesh::{extract_mesh, DensitySource};
use layoutforge::train::{toy_field_config, toy_layout, toy_trajectory, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

struct Sphere {
    radius: f64,
}

impl DensitySource for Sphere {
    fn density(&self, p: &Vec3) -> f64 {
        self.radius - p.norm()
    }
}

fn checkpoints(dir: &std::path::Path) -> bool {
    let layout = toy_layout();
    let cfg = TrainConfig::toy(3);
    let mut field = SceneField::new(toy_field_config(3), &layout).unwrap();
    for cam in toy_trajectory(32) {
        field.prepare_view(&layout, &cam, &cfg.sampling, 0).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for key in field.grid_keys() {
        let g = field.grid_mut(key).unwrap();
        g.encoding.table.iter_mut().for_each(|v| *v = rng.gen::<f32>() - 0.5);
    }
    let bytes = field_to_bytes(&field);
    let back = field_from_bytes(&bytes).unwrap();
    let path = dir.join("field.bin");
    save_field(&field, &path).unwrap();
    let loaded = load_field(&path).unwrap();
    let field_ok = back == field && loaded == field && field_to_bytes(&loaded) == bytes;

    let den = ToyDenoiser::new(DenoiserConfig::default(), NoiseSchedule::default(), &mut rng).unwrap();
    let bytes = denoiser_to_bytes(&den);
    let path = dir.join("den.bin");
    save_denoiser(&den, &path).unwrap();
    let loaded = load_denoiser(&path).unwrap();
    field_ok && denoiser_from_bytes(&bytes).unwrap() == den && loaded == den && denoiser_to_bytes(&loaded) == bytes
}

fn alignment() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let n = 4096;
    let rendered: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..40.0)).collect();
    let valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
    let mono: Vec<f64> = rendered.iter().zip(&valid).map(|(r, &v)| if v { 2.0 * r + 1.0 } else { -7.0 }).collect();
    let (a, b) = depth_align(&mono, &rendered, &valid).unwrap();
    (a - 2.0).abs().max((b - 1.0).abs())
}

pub fn check() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoints(dir.path());
    let align_err = alignment();
    let (radius, voxel) = (1.0, 0.05);
    let mesh = extract_mesh(&Sphere { radius }, &Aabb::new(Vec3::repeat(-1.5), Vec3::repeat(1.5)), voxel, 0.0).unwrap();
    let worst = mesh
        .vertices
        .iter()
        .map(|v| (Vec3::from(*v).norm() - radius).abs())
        .fold(0.0, f64::max);
    Outcome::new(
        ckpt && align_err <= 1e-6 && !mesh.is_empty() && worst <= voxel,
        format!(
            "checkpoints bit-exact: {ckpt}; depth_align err {align_err:.1e}; sphere mesh {} vertices, max radial err {worst:.4} (voxel {voxel})",
            mesh.vertices.len()
        ),
    )
}
