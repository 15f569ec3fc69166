//! Auxiliary objectives. Every loss returns its value together with the
//! gradient with respect to the rendered quantity it supervises.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::guidance::conv::{conv3x3, conv3x3_backward};
use crate::tensor::Tensor3;

/// Fixed random-projection convolutional features: two tanh-activated 3×3
/// convolutions followed by average pooling over a `grid × grid` cell layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    pub seed: u64,
    pub in_channels: usize,
    pub channels: usize,
    pub grid: usize,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

struct EncoderCache {
    cols1: Vec<f64>,
    a1: Tensor3,
    cols2: Vec<f64>,
    a2: Tensor3,
}

fn cell_bounds(n: usize, cells: usize, i: usize) -> (usize, usize) {
    (i * n / cells, ((i + 1) * n / cells).max(i * n / cells + 1).min(n))
}

impl FeatureEncoder {
    pub fn new(seed: u64, in_channels: usize, channels: usize, grid: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kernel = |cin: usize, cout: usize| -> Vec<f64> {
            let bound = (3.0 / (cin * 9) as f64).sqrt();
            (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w1 = kernel(in_channels, channels);
        let w2 = kernel(channels, channels);
        Self { seed, in_channels, channels, grid: grid.max(1), w1, w2 }
    }

    pub fn rgb(seed: u64) -> Self {
        Self::new(seed, 3, 16, 4)
    }

    pub fn feature_len(&self) -> usize {
        self.channels * self.grid * self.grid
    }

    fn forward(&self, img: &Tensor3) -> Result<(Vec<f64>, EncoderCache)> {
        if img.channels != self.in_channels {
            return Err(Error::shape(format!("{} channels", self.in_channels), img.channels));
        }
        let zeros = vec![0.0; self.channels];
        let (z1, cols1) = conv3x3(img, &self.w1, &zeros, self.channels);
        let a1 = z1.map(f64::tanh);
        let (z2, cols2) = conv3x3(&a1, &self.w2, &zeros, self.channels);
        let a2 = z2.map(f64::tanh);
        let (h, w, g) = (img.height, img.width, self.grid);
        let mut feats = vec![0.0; self.feature_len()];
        for c in 0..self.channels {
            let plane = a2.channel(c);
            for gy in 0..g {
                let (y0, y1) = cell_bounds(h, g, gy);
                for gx in 0..g {
                    let (x0, x1) = cell_bounds(w, g, gx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    feats[(c * g + gy) * g + gx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        Ok((feats, EncoderCache { cols1, a1, cols2, a2 }))
    }

    pub fn encode(&self, img: &Tensor3) -> Result<Vec<f64>> {
        Ok(self.forward(img)?.0)
    }

    fn backward(&self, cache: &EncoderCache, dfeat: &[f64]) -> Tensor3 {
        let (c_n, h, w, g) = (self.channels, cache.a2.height, cache.a2.width, self.grid);
        let mut da2 = Tensor3::zeros(c_n, h, w);
        for c in 0..c_n {
            let plane = da2.channel_mut(c);
            for gy in 0..g {
                let (y0, y1) = cell_bounds(h, g, gy);
                for gx in 0..g {
                    let (x0, x1) = cell_bounds(w, g, gx);
                    let v = dfeat[(c * g + gy) * g + gx] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        plane[y * w + x0..y * w + x1].iter_mut().for_each(|d| *d += v);
                    }
                }
            }
        }
        let tanh_back = |d: &mut Tensor3, a: &Tensor3| d.data.iter_mut().zip(&a.data).for_each(|(g, a)| *g *= 1.0 - a * a);
        tanh_back(&mut da2, &cache.a2);
        let mut scratch_w = vec![0.0; self.w2.len()];
        let mut scratch_b = vec![0.0; c_n];
        let mut da1 = conv3x3_backward(&cache.cols2, &self.w2, c_n, &da2, &mut scratch_w, &mut scratch_b, true).expect("input gradient requested");
        tanh_back(&mut da1, &cache.a1);
        let mut scratch_w = vec![0.0; self.w1.len()];
        scratch_b.iter_mut().for_each(|v| *v = 0.0);
        conv3x3_backward(&cache.cols1, &self.w1, self.in_channels, &da1, &mut scratch_w, &mut scratch_b, true).expect("input gradient requested")
    }
}

/// `‖enc(I_r) − enc(I_g)‖²` and its gradient with respect to `I_r` only.
pub fn feature_consistency_loss(rendered: &Tensor3, generated: &Tensor3, enc: &FeatureEncoder) -> Result<(f64, Tensor3)> {
    rendered.ensure_same_shape(generated)?;
    let (fr, cache) = enc.forward(rendered)?;
    let fg = enc.encode(generated)?;
    let diff: Vec<f64> = fr.iter().zip(&fg).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum();
    let dfeat: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
    Ok((loss, enc.backward(&cache, &dfeat)))
}

/// Least-squares `(a, b)` minimising `Σ_valid (a·rendered + b − mono)²`.
pub fn depth_align(mono: &[f64], rendered: &[f64], valid: &[bool]) -> Result<(f64, f64)> {
    if mono.len() != rendered.len() || valid.len() != rendered.len() {
        return Err(Error::shape(format!("{} pixels", rendered.len()), format!("{} / {}", mono.len(), valid.len())));
    }
    let idx: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if idx.len() < 2 {
        return Err(Error::DegenerateAlignment(format!("{} valid pixels", idx.len())));
    }
    let n = idx.len() as f64;
    let mr = idx.iter().map(|&i| rendered[i]).sum::<f64>() / n;
    let mm = idx.iter().map(|&i| mono[i]).sum::<f64>() / n;
    let (mut srr, mut srm) = (0.0, 0.0);
    for &i in &idx {
        let dr = rendered[i] - mr;
        srr += dr * dr;
        srm += dr * (mono[i] - mm);
    }
    let scale = idx.iter().map(|&i| rendered[i].abs()).fold(0.0, f64::max).max(1.0);
    if srr <= 1e-12 * scale * scale * n {
        return Err(Error::DegenerateAlignment("rendered depth is constant over the valid pixels".into()));
    }
    let a = srm / srr;
    Ok((a, mm - a * mr))
}

/// Mean `|a·rendered + b − mono|` over valid pixels with `(a, b)` from
/// [`depth_align`] held constant; gradient with respect to `rendered`.
pub fn depth_loss(mono: &[f64], rendered: &[f64], valid: &[bool]) -> Result<(f64, Vec<f64>)> {
    let (a, b) = depth_align(mono, rendered, valid)?;
    let n = valid.iter().filter(|&&v| v).count() as f64;
    let mut grad = vec![0.0; rendered.len()];
    let mut loss = 0.0;
    for i in 0..rendered.len() {
        if valid[i] {
            let r = a * rendered[i] + b - mono[i];
            loss += r.abs();
            grad[i] = a * r.signum() * f64::from(r != 0.0) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean opacity over sky pixels (0 when there are none); gradient w.r.t. opacity.
pub fn sky_loss(opacity: &[f64], sky: &[bool]) -> Result<(f64, Vec<f64>)> {
    if opacity.len() != sky.len() {
        return Err(Error::shape(format!("{} pixels", sky.len()), opacity.len()));
    }
    let n = sky.iter().filter(|&&s| s).count();
    if n == 0 {
        return Ok((0.0, vec![0.0; opacity.len()]));
    }
    let inv = 1.0 / n as f64;
    let loss = opacity.iter().zip(sky).filter(|(_, &s)| s).map(|(o, _)| o).sum::<f64>() * inv;
    Ok((loss, sky.iter().map(|&s| if s { inv } else { 0.0 }).collect()))
}

/// Mean squared error; gradient flows to `rendered` only.
pub fn refine_mse(rendered: &Tensor3, target: &Tensor3) -> Result<(f64, Tensor3)> {
    let diff = rendered.sub(target)?;
    let n = diff.len().max(1) as f64;
    let loss = diff.data.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}
