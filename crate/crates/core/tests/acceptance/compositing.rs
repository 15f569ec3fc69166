use layoutforge::render::composite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn random_profile(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(1..=64);
    let sigma = (0..n)
        .map(|_| match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 10f64.powf(rng.gen_range(-3.0..3.0)),
            _ => rng.gen_range(0.0..5.0),
        })
        .collect();
    let delta = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    (sigma, delta)
}

pub fn check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let (sigma, delta) = random_profile(&mut rng);
        let n = sigma.len();
        let color = vec![[0.5; 3]; n];
        let t: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let c = composite(&sigma, &delta, &color, &t, [0.0; 3]);
        let product: f64 = sigma.iter().zip(&delta).map(|(s, d)| 1.0 - (1.0 - (-s * d).exp())).product();
        worst = worst.max((1.0 - c.weights.iter().sum::<f64>() - product).abs());
    }

    let mut closed = 0.0f64;
    let mut err = |a: f64, b: f64| closed = closed.max((a - b).abs());
    let (c0, c1, sky) = ([0.9, 0.2, 0.1], [0.1, 0.8, 0.3], [0.3, 0.4, 1.0]);

    let opaque = composite(&[1e9, 2.0, 3.0], &[1.0, 1.0, 1.0], &[c0, c1, c1], &[2.0, 3.0, 4.0], sky);
    (0..3).for_each(|k| err(opaque.color[k], c0[k]));
    err(opaque.depth, 2.0);
    err(opaque.opacity, 1.0);
    err(opaque.weights[0], 1.0);
    err(opaque.weights[1] + opaque.weights[2], 0.0);

    let empty = composite(&[0.0; 4], &[0.5; 4], &[c0; 4], &[1.0, 2.0, 3.0, 4.0], sky);
    (0..3).for_each(|k| err(empty.color[k], sky[k]));
    err(empty.opacity, 0.0);
    err(empty.weights.iter().sum(), 0.0);

    let ln2 = std::f64::consts::LN_2;
    let split = composite(&[ln2, 2.0 * ln2], &[1.0, 0.5], &[c0, c1], &[1.0, 2.0], sky);
    err(split.weights[0], 0.5);
    err(split.weights[1], 0.25);
    err(split.opacity, 0.75);
    (0..3).for_each(|k| err(split.color[k], 0.5 * c0[k] + 0.25 * c1[k] + 0.25 * sky[k]));
    err(split.depth, (0.5 * 1.0 + 0.25 * 2.0) / 0.75);

    Outcome::new(
        worst <= 1e-12 && closed <= 1e-6,
        format!("telescoping max err {worst:.2e} over 1e5 profiles, closed forms max err {closed:.2e}"),
    )
}
