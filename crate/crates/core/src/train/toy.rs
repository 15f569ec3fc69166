//! Small street scene used by the toy pipeline, tests and the sample files.

use crate::camera::Camera;
use crate::field::{FieldConfig, HashGridConfig};
use crate::geometry::Vec3;
use crate::layout::{urban_classes, LayoutInstance, Pose, SceneLayout, Shape};

fn instance(id: u32, class: u8, shape: Shape, center: [f64; 3], size: [f64; 3], is_object: bool) -> LayoutInstance {
    LayoutInstance {
        id,
        class,
        shape,
        pose: Pose::axis_aligned(Vec3::from(center), Vec3::from(size)).expect("static pose"),
        is_object,
    }
}

/// Road plane, one building and one car.
pub fn toy_layout() -> SceneLayout {
    SceneLayout::new(
        urban_classes(),
        vec![
            instance(1, 1, Shape::Plane, [15.0, 0.0, 0.0], [50.0, 14.0, 0.2], false),
            instance(2, 4, Shape::Cuboid, [18.0, 9.0, 4.0], [12.0, 4.0, 8.0], false),
            instance(3, 3, Shape::Cuboid, [10.0, -2.0, 0.85], [4.2, 1.9, 1.5], true),
        ],
    )
    .expect("toy layout is valid")
}

/// Four forward-looking cameras driving down the road.
pub fn toy_trajectory(res: usize) -> Vec<Camera> {
    (0..4)
        .map(|i| {
            let x = 1.5 * i as f64;
            Camera::look_at(res, res, 90f64.to_radians(), Vec3::new(x, 0.0, 1.6), Vec3::new(x + 20.0, 0.0, 1.0))
                .expect("static camera")
        })
        .collect()
}

pub fn toy_field_config(seed: u64) -> FieldConfig {
    FieldConfig {
        grid: HashGridConfig {
            levels: 8,
            base_resolution: 4,
            per_level_scale: 1.6,
            table_size: 1 << 12,
            features_per_level: 2,
            hidden: vec![32],
        },
        tile_size: [16.0, 16.0, 8.0],
        sky_degree: 2,
        sky_hidden: vec![16],
        seed,
    }
}
