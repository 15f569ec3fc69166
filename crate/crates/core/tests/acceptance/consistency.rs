use layoutforge::raster::rasterize;
use layoutforge::render::{pixel_rng, render_image, sample_ray, IndicatorField};
use layoutforge::train::{toy_layout, toy_trajectory, TrainConfig};

use crate::Outcome;

const RES: usize = 64;

pub fn check() -> Outcome {
    let layout = toy_layout();
    let cfg = TrainConfig::toy(0);
    let sampling = cfg.sampling_at(RES);
    let field = IndicatorField { layout: &layout, sigma: 50.0, sky: [0.5, 0.7, 1.0] };
    let (mut total, mut depth_ok, mut sem_ok) = (0usize, 0usize, 0usize);
    for (v, cam) in toy_trajectory(RES).iter().enumerate() {
        let seed = 100 + v as u64;
        let maps = rasterize(&layout, cam);
        let frame = render_image(&field, &cfg.field, &layout, cam, &sampling, seed).unwrap();
        for y in 1..RES - 1 {
            for x in 1..RES - 1 {
                let p = y * RES + x;
                let interior = (-1i64..=1).all(|dy| {
                    (-1i64..=1).all(|dx| {
                        let q = ((y as i64 + dy) as usize) * RES + (x as i64 + dx) as usize;
                        !maps.sky[q] && maps.semantic[q] == maps.semantic[p]
                    })
                });
                if !interior {
                    continue;
                }
                let set = sample_ray(&layout, &cam.ray(x, y), &sampling, &mut pixel_rng(seed, p));
                let spacing = set.samples.iter().map(|s| s.delta).sum::<f64>() / set.samples.len().max(1) as f64;
                total += 1;
                depth_ok += usize::from((frame.depth[p] - maps.depth[p]).abs() <= 2.0 * spacing);
                sem_ok += usize::from(frame.semantic[p] == maps.semantic[p]);
            }
        }
    }
    let depth_frac = depth_ok as f64 / total.max(1) as f64;
    Outcome::new(
        total > 0 && depth_frac >= 0.99 && sem_ok == total,
        format!(
            "{total} interior pixels, depth within 2x spacing on {:.2}%, semantics equal on {sem_ok}",
            100.0 * depth_frac
        ),
    )
}
