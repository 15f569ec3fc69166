use std::collections::BTreeSet;

use layoutforge::camera::Camera;
use layoutforge::field::{Assignment, FieldConfig, GridKey, SceneField};
use layoutforge::geometry::{yaw, Vec3};
use layoutforge::layout::{urban_classes, LayoutInstance, Pose, SceneLayout, Shape};
use layoutforge::render::{view_grids, SamplingConfig};
use layoutforge::train::toy_field_config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn random_layout(rng: &mut ChaCha8Rng) -> SceneLayout {
    let n = rng.gen_range(1..=8);
    let instances = (0..n)
        .map(|i| {
            let shape = [Shape::Cuboid, Shape::Ellipsoid, Shape::Plane][rng.gen_range(0..3)];
            let mut size = Vec3::new(rng.gen_range(0.5..12.0), rng.gen_range(0.5..12.0), rng.gen_range(0.5..6.0));
            if shape == Shape::Plane {
                size.z = 0.2;
            }
            let center = Vec3::new(rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), rng.gen_range(-1.0..4.0));
            LayoutInstance {
                id: 10 + i,
                class: rng.gen_range(1..=5),
                shape,
                pose: Pose::new(yaw(rng.gen_range(-3.2..3.2)), center, size).unwrap(),
                is_object: rng.gen_bool(0.5),
            }
        })
        .collect();
    SceneLayout::new(urban_classes(), instances).unwrap()
}

fn inside(inst: &LayoutInstance, p: &Vec3) -> bool {
    let d = p - inst.pose.translation;
    let r = &inst.pose.rotation;
    let c: [f64; 3] = std::array::from_fn(|a| r.column(a).dot(&d) / inst.pose.size[a]);
    match inst.shape {
        Shape::Ellipsoid => c.iter().map(|v| v * v).sum::<f64>() <= 0.25,
        _ => c.iter().all(|v| v.abs() <= 0.5),
    }
}

fn tile(cfg: &FieldConfig, p: &Vec3) -> [i32; 3] {
    std::array::from_fn(|a| (p[a] / cfg.tile_size[a]).floor() as i32)
}

/// Grid that should own `p`, ignoring whether it has been spawned.
fn oracle_key(layout: &SceneLayout, cfg: &FieldConfig, p: &Vec3) -> GridKey {
    let mut best: Option<(f64, u32)> = None;
    for inst in layout.instances.iter().filter(|i| i.is_object && inside(i, p)) {
        let cand = ((p - inst.pose.translation).norm_squared(), inst.id);
        if best.is_none_or(|b| cand.0 < b.0 || (cand.0 == b.0 && cand.1 < b.1)) {
            best = Some(cand);
        }
    }
    match best {
        Some((_, id)) => GridKey::Object(id),
        None => GridKey::Stuff(tile(cfg, p)),
    }
}

fn oracle_assignment(field: &SceneField, layout: &SceneLayout, p: &Vec3) -> Assignment {
    let key = oracle_key(layout, &field.config, p);
    let present = match key {
        GridKey::Object(id) => field.objects.contains_key(&id),
        GridKey::Stuff(t) => field.stuff.contains_key(&t),
    };
    match (present, key) {
        (false, k) => Assignment::SpawnRequired(k),
        (true, GridKey::Object(id)) => Assignment::Object(id),
        (true, GridKey::Stuff(t)) => Assignment::Stuff(t),
    }
}

fn point_check() -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut cfg = toy_field_config(0);
    cfg.grid.table_size = 1 << 4;
    cfg.grid.levels = 1;
    let (mut mismatches, mut total) = (0, 0);
    for _ in 0..20 {
        let layout = random_layout(&mut rng);
        let mut field = SceneField::new(cfg.clone(), &layout).unwrap();
        let ids: Vec<u32> = field.objects.keys().copied().collect();
        for id in ids {
            if rng.gen_bool(0.3) {
                field.objects.remove(&id);
            }
        }
        for _ in 0..40 {
            let t = [rng.gen_range(-2..2), rng.gen_range(-2..2), rng.gen_range(-1..1)];
            let _ = field.spawn_stuff_grid(t);
        }
        for _ in 0..500 {
            let p = if rng.gen_bool(0.5) {
                Vec3::new(rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0), rng.gen_range(-3.0..8.0))
            } else {
                let inst = &layout.instances[rng.gen_range(0..layout.instances.len())];
                let c = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
                inst.pose.from_canonical(&c)
            };
            total += 1;
            if field.assign_point(&layout, &p) != oracle_assignment(&field, &layout, &p) {
                mismatches += 1;
            }
        }
    }
    (mismatches, total)
}

/// Keys hit by a dense march along every pixel ray, restricted to layout interiors.
fn frustum_oracle(layout: &SceneLayout, cfg: &FieldConfig, cams: &[Camera], sampling: &SamplingConfig) -> BTreeSet<GridKey> {
    let mut keys = BTreeSet::new();
    let step = 0.01;
    for cam in cams {
        for y in 0..cam.height {
            for x in 0..cam.width {
                let ray = cam.ray(x, y);
                let mut t = sampling.near;
                while t < sampling.far {
                    let p = ray.at(t);
                    if layout.instances.iter().any(|i| inside(i, &p)) {
                        keys.insert(oracle_key(layout, cfg, &p));
                    }
                    t += step;
                }
            }
        }
    }
    keys
}

fn spawn_check() -> (BTreeSet<GridKey>, BTreeSet<GridKey>, BTreeSet<i32>) {
    let mut cfg = toy_field_config(0);
    cfg.tile_size = [16.0, 16.0, 8.0];
    let inst = |id, class, shape, c: [f64; 3], s: [f64; 3], obj| LayoutInstance {
        id,
        class,
        shape,
        pose: Pose::axis_aligned(Vec3::from(c), Vec3::from(s)).unwrap(),
        is_object: obj,
    };
    let layout = SceneLayout::new(
        urban_classes(),
        vec![
            inst(1, 1, Shape::Plane, [24.0, 0.0, 0.0], [46.0, 6.0, 0.2], false),
            inst(2, 4, Shape::Cuboid, [24.0, 6.0, 3.0], [10.0, 3.0, 6.0], false),
            inst(3, 3, Shape::Cuboid, [10.0, -1.0, 0.8], [4.0, 1.8, 1.5], true),
        ],
    )
    .unwrap();
    let sampling = SamplingConfig { samples_per_ray: 64, near: 0.05, far: 30.0, constrained: true };
    let cams: Vec<Camera> = [2.0, 18.0, 34.0]
        .iter()
        .map(|&x| Camera::look_at(24, 24, 90f64.to_radians(), Vec3::new(x, 0.0, 1.5), Vec3::new(x + 10.0, 0.0, 0.0)).unwrap())
        .collect();
    let mut field = SceneField::new(cfg.clone(), &layout).unwrap();
    let mut spawned = BTreeSet::new();
    for (i, cam) in cams.iter().enumerate() {
        spawned.extend(field.prepare_view(&layout, cam, &sampling, i as u64).unwrap());
        spawned.extend(view_grids(&cfg, &layout, cam, &sampling, i as u64).into_iter().filter(|k| matches!(k, GridKey::Object(_))));
    }
    let oracle = frustum_oracle(&layout, &cfg, &cams, &sampling);
    let x_tiles = spawned
        .iter()
        .filter_map(|k| match k {
            GridKey::Stuff(t) => Some(t[0]),
            _ => None,
        })
        .collect();
    (spawned, oracle, x_tiles)
}

pub fn check() -> Outcome {
    let (mismatches, total) = point_check();
    let (spawned, oracle, x_tiles) = spawn_check();
    let sets_equal = spawned == oracle;
    let three_tiles = x_tiles == BTreeSet::from([0, 1, 2]);
    let mut detail = format!("assign_point {mismatches} mismatches over {total} points; spawn set {} keys over x tiles {x_tiles:?}", spawned.len());
    if !sets_equal {
        let extra: Vec<_> = spawned.difference(&oracle).collect();
        let missing: Vec<_> = oracle.difference(&spawned).collect();
        detail += &format!(", differs from frustum oracle (extra {extra:?}, missing {missing:?})");
    }
    Outcome::new(mismatches == 0 && total >= 10_000 && sets_equal && three_tiles, detail)
}
