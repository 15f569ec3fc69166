//! Low-rank adapted copy of a frozen base denoiser with a camera embedding.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::conv::{gemm, Mat};
use super::denoiser::{Denoiser, DenoiserWeights, NoiseQuery, PredictCache, StyleToken, ToyDenoiser};
use super::schedule::NoiseSchedule;
use crate::error::Result;
use crate::optim::Adam;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Camera positions are divided by this before the embedding.
    pub camera_scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, camera_scale: 50.0 }
    }
}

/// `ΔW = B·A` with `B: rows × rank` and `A: rank × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LoraPair {
    fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rank: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        Self {
            rows,
            cols,
            rank,
            a: (0..rank * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
            b: vec![0.0; rows * rank],
        }
    }

    fn is_zero(&self) -> bool {
        self.b.iter().all(|&v| v == 0.0) || self.a.iter().all(|&v| v == 0.0)
    }

    fn add_delta(&self, w: &mut [f64]) {
        gemm(Mat::new(&self.b, self.rows, self.rank), Mat::new(&self.a, self.rank, self.cols), 1.0, w);
    }

    /// `(dA, dB)` from the gradient of the effective matrix.
    fn backward(&self, dw: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut da = vec![0.0; self.a.len()];
        let mut db = vec![0.0; self.b.len()];
        gemm(Mat::new(&self.b, self.rows, self.rank).t(), Mat::new(dw, self.rows, self.cols), 0.0, &mut da);
        gemm(Mat::new(dw, self.rows, self.cols), Mat::new(&self.a, self.rank, self.cols).t(), 0.0, &mut db);
        (da, db)
    }
}

/// Trainable adapter state; also the gradient type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub conv: Vec<LoraPair>,
    pub time: Vec<LoraPair>,
    /// `hidden × 12`.
    pub camera_w: Vec<f64>,
    pub camera_b: Vec<f64>,
}

pub type AdapterGrad = AdapterParams;

impl AdapterParams {
    pub fn groups(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (l, p) in self.conv.iter().enumerate() {
            out.push((format!("conv{l}.a"), &p.a));
            out.push((format!("conv{l}.b"), &p.b));
        }
        for (l, p) in self.time.iter().enumerate() {
            out.push((format!("time{l}.a"), &p.a));
            out.push((format!("time{l}.b"), &p.b));
        }
        out.push(("camera.w".into(), &self.camera_w));
        out.push(("camera.b".into(), &self.camera_b));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (l, p) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{l}.a"), &mut p.a));
            out.push((format!("conv{l}.b"), &mut p.b));
        }
        for (l, p) in self.time.iter_mut().enumerate() {
            out.push((format!("time{l}.a"), &mut p.a));
            out.push((format!("time{l}.b"), &mut p.b));
        }
        out.push(("camera.w".into(), &mut self.camera_w));
        out.push(("camera.b".into(), &mut self.camera_b));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, g) in z.groups_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.groups().iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, g) in self.groups_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptedDenoiser {
    pub base: Arc<ToyDenoiser>,
    pub config: AdapterConfig,
    params: AdapterParams,
    effective: DenoiserWeights,
}

impl AdaptedDenoiser {
    /// Fresh adapter: `B = 0`, random `A`, zero camera embedding. Rank 0 disables
    /// both the low-rank deltas and the camera embedding.
    pub fn new<R: Rng + ?Sized>(base: Arc<ToyDenoiser>, config: AdapterConfig, rng: &mut R) -> Self {
        let cfg = &base.config;
        let r = config.rank;
        let (conv, time, cam) = if r == 0 {
            (Vec::new(), Vec::new(), 0)
        } else {
            let conv = cfg.conv_shapes().iter().map(|&(i, o)| LoraPair::new(o, i * 9, r, rng)).collect();
            let time = (0..cfg.layers - 1).map(|_| LoraPair::new(cfg.hidden, cfg.time_dim, r, rng)).collect();
            (conv, time, cfg.hidden)
        };
        let params = AdapterParams {
            conv,
            time,
            camera_w: vec![0.0; cam * 12],
            camera_b: vec![0.0; cam],
        };
        let effective = base.weights.clone();
        let mut out = Self { base, config, params, effective };
        out.refresh();
        out
    }

    pub fn params(&self) -> &AdapterParams {
        &self.params
    }

    pub fn set_params(&mut self, params: AdapterParams) {
        self.params = params;
        self.refresh();
    }

    pub fn update_params(&mut self, f: impl FnOnce(&mut AdapterParams)) {
        f(&mut self.params);
        self.refresh();
    }

    pub fn effective_weights(&self) -> &DenoiserWeights {
        &self.effective
    }

    fn refresh(&mut self) {
        let mut w = self.base.weights.clone();
        for (l, p) in self.params.conv.iter().enumerate() {
            if !p.is_zero() {
                p.add_delta(&mut w.conv_w[l]);
            }
        }
        for (l, p) in self.params.time.iter().enumerate() {
            if !p.is_zero() {
                p.add_delta(&mut w.time_w[l]);
            }
        }
        self.effective = w;
    }

    fn camera_features(&self, cam: &[f64; 12]) -> [f64; 12] {
        let mut f = *cam;
        for v in &mut f[9..] {
            *v /= self.config.camera_scale;
        }
        f
    }

    /// Per-channel first-layer bias from the camera embedding; `None` when it is
    /// identically zero so zero adapters reproduce the base bit for bit.
    fn camera_bias(&self, cam: Option<&[f64; 12]>) -> Option<Vec<f64>> {
        let cam = cam?;
        let p = &self.params;
        if p.camera_b.is_empty() || (p.camera_w.iter().all(|&v| v == 0.0) && p.camera_b.iter().all(|&v| v == 0.0)) {
            return None;
        }
        let f = self.camera_features(cam);
        Some(
            p.camera_b
                .iter()
                .enumerate()
                .map(|(c, b)| b + p.camera_w[c * 12..][..12].iter().zip(&f).map(|(w, x)| w * x).sum::<f64>())
                .collect(),
        )
    }

    /// Noise loss `mean (ε̂_φ − ε)²` and its adapter gradient.
    pub fn loss_and_grad(&self, q: &NoiseQuery<'_>, eps: &Tensor3) -> Result<(f64, AdapterGrad)> {
        let extra = self.camera_bias(q.camera);
        let mut cache = PredictCache {
            precond: super::denoiser::Precond::new(&self.base.schedule, 0, self.base.config.sigma_data),
            net: Default::default(),
        };
        let pred = self.base.predict_with(&self.effective, q, extra.as_deref(), Some(&mut cache))?;
        let (loss, dpred) = super::denoiser::noise_loss(&pred, eps)?;
        let mut dw = self.effective.zeros_like();
        let dbias0 = self.base.backward_with(&self.effective, &cache, &dpred, &mut dw);
        let mut grad = self.params.zeros_like();
        for (l, p) in self.params.conv.iter().enumerate() {
            let (da, db) = p.backward(&dw.conv_w[l]);
            grad.conv[l].a = da;
            grad.conv[l].b = db;
        }
        for (l, p) in self.params.time.iter().enumerate() {
            let (da, db) = p.backward(&dw.time_w[l]);
            grad.time[l].a = da;
            grad.time[l].b = db;
        }
        if let (Some(cam), false) = (q.camera, grad.camera_b.is_empty()) {
            let f = self.camera_features(cam);
            for (c, &g) in dbias0.iter().enumerate() {
                grad.camera_b[c] = g;
                for k in 0..12 {
                    grad.camera_w[c * 12 + k] = g * f[k];
                }
            }
        }
        Ok((loss, grad))
    }
}

impl Denoiser for AdaptedDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.base.schedule
    }

    fn predict_noise(&self, q: &NoiseQuery<'_>) -> Result<Tensor3> {
        let extra = self.camera_bias(q.camera);
        self.base.predict_with(&self.effective, q, extra.as_deref(), None)
    }
}

/// One rendered view the adapter is fitted on.
pub struct AdapterSample<'a> {
    pub x0: &'a Tensor3,
    pub camera: &'a [f64; 12],
    pub condition: Option<&'a Tensor3>,
}

/// One optimizer step on the adapter's noise loss over freshly drawn `(t, ε)`.
/// Returns the batch loss before the update. The base network is never touched.
pub fn adapter_step<R: Rng + ?Sized>(
    adapted: &mut AdaptedDenoiser,
    batch: &[AdapterSample<'_>],
    style: StyleToken,
    schedule: &NoiseSchedule,
    optimizer: &mut Adam,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() || adapted.params.param_count() == 0 {
        return Ok(0.0);
    }
    let mut total = adapted.params.zeros_like();
    let mut loss = 0.0;
    for s in batch {
        let t = schedule.sample_timestep(rng);
        let eps = Tensor3::randn(s.x0.channels, s.x0.height, s.x0.width, rng);
        let x_t = schedule.perturb(s.x0, t, &eps)?;
        let q = NoiseQuery {
            x_t: &x_t,
            t,
            condition: s.condition,
            style,
            camera: Some(s.camera),
        };
        let (l, g) = adapted.loss_and_grad(&q, &eps)?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    let mut params = adapted.params.clone();
    for ((name, p), (_, g)) in params.groups_mut().into_iter().zip(total.groups()) {
        optimizer.update(&format!("adapter.{name}"), p, g);
    }
    adapted.set_params(params);
    Ok(loss / n)
}

/// Perturbs adapter deltas with Gaussian noise of the given scale (used to start
/// from a deliberately mismatched adapter).
pub fn jitter_adapter<R: Rng + ?Sized>(adapted: &mut AdaptedDenoiser, scale: f64, rng: &mut R) {
    adapted.update_params(|p| {
        for (_, g) in p.groups_mut() {
            g.iter_mut().for_each(|v| *v += scale * rng.sample::<f64, _>(StandardNormal));
        }
    });
}
