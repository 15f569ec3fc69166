//! Noise-prediction interface and the small convolutional toy denoiser.
//!
//! The network `F` predicts a denoised image through the usual variance-preserving
//! preconditioning: with `σ² = (1−ᾱ)/ᾱ` and `y = x_t/√ᾱ`,
//! `D = c_skip·y + c_out·F(c_in·y ++ cond, t, style)` and
//! `ε̂ = (x_t − √ᾱ·D)/√(1−ᾱ)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv3x3, conv3x3_backward};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::field::mlp::{silu, silu_grad};
use crate::tensor::Tensor3;

pub type StyleToken = usize;

#[derive(Clone, Copy)]
pub struct NoiseQuery<'a> {
    pub x_t: &'a Tensor3,
    pub t: usize,
    /// `None` runs the unconditional branch (condition channels zeroed).
    pub condition: Option<&'a Tensor3>,
    pub style: StyleToken,
    /// Flattened extrinsics; ignored by denoisers without a camera embedding.
    pub camera: Option<&'a [f64; 12]>,
}

pub trait Denoiser: Sync {
    fn schedule(&self) -> &NoiseSchedule;
    fn predict_noise(&self, q: &NoiseQuery<'_>) -> Result<Tensor3>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub condition_channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
    pub styles: usize,
    pub sigma_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            condition_channels: 7,
            hidden: 32,
            layers: 4,
            time_dim: 16,
            styles: 3,
            sigma_data: 0.5,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::validation("denoiser needs at least two layers"));
        }
        if self.image_channels == 0 || self.hidden == 0 || self.styles == 0 {
            return Err(Error::validation("denoiser widths must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::validation("time embedding width must be even and positive"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::validation("sigma_data must be positive"));
        }
        Ok(())
    }

    /// `(cin, cout)` of every convolution.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let cin = if l == 0 { self.image_channels + self.condition_channels } else { self.hidden };
                let cout = if l + 1 == self.layers { self.image_channels } else { self.hidden };
                (cin, cout)
            })
            .collect()
    }
}

/// Every parameter tensor of the network. Also used as the gradient type.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    /// Per layer, `cout × (cin·9)`.
    pub conv_w: Vec<Vec<f64>>,
    pub conv_b: Vec<Vec<f64>>,
    /// Per hidden layer, `hidden × time_dim`.
    pub time_w: Vec<Vec<f64>>,
    pub time_b: Vec<Vec<f64>>,
    /// `styles × hidden`, added on the first layer.
    pub style: Vec<f64>,
}

pub type DenoiserGrad = DenoiserWeights;

fn glorot<R: Rng + ?Sized>(n: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl DenoiserWeights {
    pub fn init<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let shapes = cfg.conv_shapes();
        let hidden_layers = cfg.layers - 1;
        Self {
            conv_w: shapes.iter().map(|&(i, o)| glorot(o * i * 9, i * 9, o * 9, rng)).collect(),
            conv_b: shapes.iter().map(|&(_, o)| vec![0.0; o]).collect(),
            time_w: (0..hidden_layers)
                .map(|_| glorot(cfg.hidden * cfg.time_dim, cfg.time_dim, cfg.hidden, rng))
                .collect(),
            time_b: (0..hidden_layers).map(|_| vec![0.0; cfg.hidden]).collect(),
            style: vec![0.0; cfg.styles * cfg.hidden],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Vec<f64>>| v.iter().map(|x| vec![0.0; x.len()]).collect();
        Self {
            conv_w: z(&self.conv_w),
            conv_b: z(&self.conv_b),
            time_w: z(&self.time_w),
            time_b: z(&self.time_b),
            style: vec![0.0; self.style.len()],
        }
    }

    /// Named parameter groups in a fixed order.
    pub fn groups(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            out.push((format!("conv{l}.w"), w));
            out.push((format!("conv{l}.b"), b));
        }
        for (l, (w, b)) in self.time_w.iter().zip(&self.time_b).enumerate() {
            out.push((format!("time{l}.w"), w));
            out.push((format!("time{l}.b"), b));
        }
        out.push(("style".into(), &self.style));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()).enumerate() {
            out.push((format!("conv{l}.w"), w));
            out.push((format!("conv{l}.b"), b));
        }
        for (l, (w, b)) in self.time_w.iter_mut().zip(self.time_b.iter_mut()).enumerate() {
            out.push((format!("time{l}.w"), w));
            out.push((format!("time{l}.b"), b));
        }
        out.push(("style".into(), &mut self.style));
        out
    }

    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, a) in self.groups_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.groups().iter().flat_map(|(_, v)| v.iter()).map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().flat_map(|(_, v)| v.iter()).all(|x| x.is_finite())
    }
}

pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

/// Preconditioning coefficients at timestep `t`.
#[derive(Debug, Clone, Copy)]
pub struct Precond {
    pub sqrt_ab: f64,
    pub sqrt_1m_ab: f64,
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
}

impl Precond {
    pub fn new(schedule: &NoiseSchedule, t: usize, sigma_data: f64) -> Self {
        let ab = schedule.alpha_bar(t);
        let sigma2 = (1.0 - ab) / ab;
        let sd2 = sigma_data * sigma_data;
        let norm = (sigma2 + sd2).sqrt();
        Self {
            sqrt_ab: ab.sqrt(),
            sqrt_1m_ab: (1.0 - ab).sqrt(),
            c_in: 1.0 / norm,
            c_skip: sd2 / (sigma2 + sd2),
            c_out: sigma2.sqrt() * sigma_data / norm,
        }
    }

    /// `ε̂ = a·x_t + b·F`.
    pub fn eps_coefficients(&self) -> (f64, f64) {
        ((1.0 - self.c_skip) / self.sqrt_1m_ab, -self.sqrt_ab * self.c_out / self.sqrt_1m_ab)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    cols: Vec<Vec<f64>>,
    pre: Vec<Tensor3>,
    temb: Vec<f64>,
    style: StyleToken,
    cins: Vec<usize>,
}

/// Runs the network `F` with the given weights. `extra_bias0` is added to the
/// first layer's per-channel bias (camera conditioning).
pub fn network_forward(
    cfg: &DenoiserConfig,
    w: &DenoiserWeights,
    input: &Tensor3,
    t: usize,
    style: StyleToken,
    extra_bias0: Option<&[f64]>,
    mut cache: Option<&mut ForwardCache>,
) -> Tensor3 {
    let temb = timestep_embedding(t, cfg.time_dim);
    let mut h = input.clone();
    let mut cols_all = Vec::new();
    let mut pre_all = Vec::new();
    let mut cins = Vec::new();
    for (l, (i, o)) in cfg.conv_shapes().into_iter().enumerate() {
        let mut bias = w.conv_b[l].clone();
        if l + 1 < cfg.layers {
            let tw = &w.time_w[l];
            for (c, b) in bias.iter_mut().enumerate() {
                let proj: f64 = tw[c * cfg.time_dim..][..cfg.time_dim].iter().zip(&temb).map(|(a, e)| a * e).sum();
                *b += proj + w.time_b[l][c];
            }
            if l == 0 {
                for (c, b) in bias.iter_mut().enumerate() {
                    *b += w.style[style * cfg.hidden + c];
                }
                if let Some(extra) = extra_bias0 {
                    bias.iter_mut().zip(extra).for_each(|(b, e)| *b += e);
                }
            }
        }
        let (z, cols) = conv3x3(&h, &w.conv_w[l], &bias, o);
        cins.push(i);
        if l + 1 < cfg.layers {
            h = z.map(silu);
            if cache.is_some() {
                pre_all.push(z);
                cols_all.push(cols);
            }
        } else {
            if cache.is_some() {
                cols_all.push(cols);
            }
            h = z;
        }
    }
    if let Some(c) = cache.as_deref_mut() {
        *c = ForwardCache {
            cols: cols_all,
            pre: pre_all,
            temb,
            style,
            cins,
        };
    }
    h
}

/// Accumulates `∂/∂w` of `⟨dout, F⟩` into `grad`; returns the gradient of the
/// first layer's per-channel bias (for camera conditioning).
pub fn network_backward(cfg: &DenoiserConfig, w: &DenoiserWeights, cache: &ForwardCache, dout: &Tensor3, grad: &mut DenoiserGrad) -> Vec<f64> {
    let mut d = dout.clone();
    let mut dbias0 = Vec::new();
    for l in (0..cfg.layers).rev() {
        if l + 1 < cfg.layers {
            let z = &cache.pre[l];
            d.data.iter_mut().zip(&z.data).for_each(|(g, &x)| *g *= silu_grad(x));
        }
        let mut dbias = vec![0.0; d.channels];
        let dx = conv3x3_backward(&cache.cols[l], &w.conv_w[l], cache.cins[l], &d, &mut grad.conv_w[l], &mut dbias, l > 0);
        grad.conv_b[l].iter_mut().zip(&dbias).for_each(|(g, b)| *g += b);
        if l + 1 < cfg.layers {
            for (c, &db) in dbias.iter().enumerate() {
                grad.time_b[l][c] += db;
                for (k, e) in cache.temb.iter().enumerate() {
                    grad.time_w[l][c * cfg.time_dim + k] += db * e;
                }
            }
            if l == 0 {
                for (c, &db) in dbias.iter().enumerate() {
                    grad.style[cache.style * cfg.hidden + c] += db;
                }
                dbias0 = dbias;
            }
        }
        if let Some(dx) = dx {
            d = dx;
        }
    }
    dbias0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub weights: DenoiserWeights,
}

/// Intermediate values of one noise prediction, kept for backward.
#[derive(Debug, Clone)]
pub struct PredictCache {
    pub precond: Precond,
    pub net: ForwardCache,
}

impl ToyDenoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, schedule: NoiseSchedule, rng: &mut R) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let weights = DenoiserWeights::init(&config, rng);
        Ok(Self { config, schedule, weights })
    }

    pub(crate) fn check_query(&self, q: &NoiseQuery<'_>) -> Result<()> {
        check_query(&self.config, &self.schedule, q)
    }

    /// Network input `c_in·y ++ cond`.
    pub(crate) fn network_input(&self, q: &NoiseQuery<'_>, p: &Precond) -> Result<Tensor3> {
        let scaled = q.x_t.scale(p.c_in / p.sqrt_ab);
        let cond = match q.condition {
            Some(c) => c.clone(),
            None => Tensor3::zeros(self.config.condition_channels, q.x_t.height, q.x_t.width),
        };
        scaled.concat_channels(&cond)
    }

    /// Prediction with explicit weights, optionally caching for backward.
    pub fn predict_with(
        &self,
        weights: &DenoiserWeights,
        q: &NoiseQuery<'_>,
        extra_bias0: Option<&[f64]>,
        cache: Option<&mut PredictCache>,
    ) -> Result<Tensor3> {
        self.check_query(q)?;
        let p = Precond::new(&self.schedule, q.t, self.config.sigma_data);
        let input = self.network_input(q, &p)?;
        let mut net_cache = ForwardCache::default();
        let f = network_forward(
            &self.config,
            weights,
            &input,
            q.t,
            q.style,
            extra_bias0,
            cache.is_some().then_some(&mut net_cache),
        );
        if let Some(c) = cache {
            *c = PredictCache { precond: p, net: net_cache };
        }
        let (a, b) = p.eps_coefficients();
        q.x_t.lincomb(a, &f, b)
    }

    /// Gradient of `⟨deps, ε̂⟩` w.r.t. the weights; returns the first-layer bias gradient.
    pub fn backward_with(&self, weights: &DenoiserWeights, cache: &PredictCache, deps: &Tensor3, grad: &mut DenoiserGrad) -> Vec<f64> {
        let (_, b) = cache.precond.eps_coefficients();
        network_backward(&self.config, weights, &cache.net, &deps.scale(b), grad)
    }

    /// Denoised estimate `x̂0 = (x_t − √(1−ᾱ)·ε̂)/√ᾱ`.
    pub fn predict_x0(&self, q: &NoiseQuery<'_>) -> Result<Tensor3> {
        let eps = self.predict_noise(q)?;
        let ab = self.schedule.alpha_bar(q.t);
        q.x_t.lincomb(1.0 / ab.sqrt(), &eps, -(1.0 - ab).sqrt() / ab.sqrt())
    }
}

pub(crate) fn check_query(cfg: &DenoiserConfig, schedule: &NoiseSchedule, q: &NoiseQuery<'_>) -> Result<()> {
    if q.x_t.channels != cfg.image_channels {
        return Err(Error::shape(
            format!("{} image channels", cfg.image_channels),
            format!("{}", q.x_t.channels),
        ));
    }
    if let Some(c) = q.condition {
        if c.channels != cfg.condition_channels || c.height != q.x_t.height || c.width != q.x_t.width {
            return Err(Error::shape(
                format!("condition {}x{}x{}", cfg.condition_channels, q.x_t.height, q.x_t.width),
                format!("{}x{}x{}", c.channels, c.height, c.width),
            ));
        }
    }
    if q.t >= schedule.steps {
        return Err(Error::validation(format!("timestep {} >= {}", q.t, schedule.steps)));
    }
    if q.style >= cfg.styles {
        return Err(Error::validation(format!("style token {} outside vocabulary of {}", q.style, cfg.styles)));
    }
    Ok(())
}

impl Denoiser for ToyDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, q: &NoiseQuery<'_>) -> Result<Tensor3> {
        self.predict_with(&self.weights, q, None, None)
    }
}

/// Squared-error noise loss `mean (ε̂ − ε)²` and its gradient w.r.t. `ε̂`.
pub fn noise_loss(pred: &Tensor3, eps: &Tensor3) -> Result<(f64, Tensor3)> {
    let diff = pred.sub(eps)?;
    let n = diff.len().max(1) as f64;
    let loss = diff.data.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}
