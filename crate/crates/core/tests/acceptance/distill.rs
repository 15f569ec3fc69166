use std::sync::Arc;

use layoutforge::guidance::{
    draw_noise, jitter_adapter, lg_vsd_gradient, sds_gradient, vsd_gradient, AdaptedDenoiser, AdapterConfig, Denoiser,
    DenoiserConfig, FixedCondition, NoiseQuery, NoiseSchedule, ToyDenoiser,
};
use layoutforge::raster::{encode_condition, rasterize};
use layoutforge::tensor::Tensor3;
use layoutforge::train::{toy_layout, toy_trajectory};
use layoutforge::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

/// Predicts exactly the noise a given RNG state will draw.
struct Replay {
    schedule: NoiseSchedule,
    eps: Tensor3,
}

impl Denoiser for Replay {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, _q: &NoiseQuery<'_>) -> Result<Tensor3> {
        Ok(self.eps.clone())
    }
}

fn max_abs(t: &Tensor3) -> f64 {
    t.data.iter().fold(0.0, |a, v| a.max(v.abs()))
}

pub fn check() -> Outcome {
    const RES: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let schedule = NoiseSchedule::default();
    let base = Arc::new(ToyDenoiser::new(DenoiserConfig::default(), schedule.clone(), &mut rng).unwrap());
    let layout = toy_layout();
    let cam = toy_trajectory(RES)[0].clone();
    let cond = encode_condition(&rasterize(&layout, &cam), layout.class_count(), RES);
    let extr = cam.extrinsics();
    let x0 = Tensor3::randn(3, RES, RES, &mut rng).scale(0.5);

    let mut sds_max = 0.0f64;
    for s in 0..8 {
        let draw_rng = ChaCha8Rng::seed_from_u64(1000 + s);
        let replay = Replay { schedule: schedule.clone(), eps: draw_noise(&x0, &schedule, &mut draw_rng.clone()).unwrap().eps };
        let g = sds_gradient(&x0, &replay, &schedule, Some(&cond), 0, &mut draw_rng.clone()).unwrap();
        sds_max = sds_max.max(max_abs(&g));
    }

    let mut zero_adapter = AdaptedDenoiser::new(base.clone(), AdapterConfig::default(), &mut rng);
    let zeros = zero_adapter.params().zeros_like();
    zero_adapter.set_params(zeros);
    let mut pair_max = 0.0f64;
    for s in 0..8 {
        let g = vsd_gradient(&x0, base.as_ref(), &zero_adapter, &schedule, &extr, 1, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        pair_max = pair_max.max(max_abs(&g));
        let g = lg_vsd_gradient(&x0, base.as_ref(), &zero_adapter, &schedule, &cond, &extr, 1, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        pair_max = pair_max.max(max_abs(&g));
    }

    let mut adapted = AdaptedDenoiser::new(base.clone(), AdapterConfig::default(), &mut rng);
    jitter_adapter(&mut adapted, 0.05, &mut rng);
    let fixed_base = FixedCondition { inner: base.as_ref(), condition: &cond };
    let fixed_adapted = FixedCondition { inner: &adapted, condition: &cond };
    let mut equiv = 0.0f64;
    let mut magnitude = 0.0f64;
    for s in 0..8 {
        let a = lg_vsd_gradient(&x0, base.as_ref(), &adapted, &schedule, &cond, &extr, 2, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        let b = vsd_gradient(&x0, &fixed_base, &fixed_adapted, &schedule, &extr, 2, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        equiv = equiv.max(max_abs(&a.sub(&b).unwrap()));
        magnitude = magnitude.max(max_abs(&a));
    }

    Outcome::new(
        sds_max == 0.0 && pair_max == 0.0 && equiv <= 1e-12 && magnitude > 0.0,
        format!(
            "sds max |g| {sds_max:.1e}, vsd/lg_vsd with coinciding denoisers {pair_max:.1e}, lg_vsd vs vsd under a fixed condition {equiv:.1e} (|g| up to {magnitude:.2})"
        ),
    )
}
