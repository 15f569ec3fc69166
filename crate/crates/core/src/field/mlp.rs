//! Small fully-connected networks with SiLU hidden activations and a linear
//! output layer. Parameters are `f32`; evaluation and gradients are `f64`.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| rng.gen_range(-bound..bound) as f32)
                .collect(),
            bias: vec![0.0; outputs],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    /// Input of every layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Mlp {
    /// `widths` lists every layer size, input first and output last.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self {
            layers: widths.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = affine(layer, &h);
            if li < last {
                out.iter_mut().for_each(|v| *v = silu(*v));
            }
            h = out;
        }
        h
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut MlpCache) -> Vec<f64> {
        cache.inputs.clear();
        cache.pre.clear();
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let pre = affine(layer, &h);
            cache.inputs.push(std::mem::take(&mut h));
            if li < last {
                h = pre.iter().map(|&v| silu(v)).collect();
                cache.pre.push(pre);
            } else {
                h = pre;
            }
        }
        h
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grad: &mut MlpGrad) -> Vec<f64> {
        let mut g = dout.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            if li < self.layers.len() - 1 {
                for (gv, &p) in g.iter_mut().zip(&cache.pre[li]) {
                    *gv *= silu_grad(p);
                }
            }
            let input = &cache.inputs[li];
            let gw = &mut grad.weight[li];
            for o in 0..layer.outputs {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                grad.bias[li][o] += go;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (r, &x) in row.iter_mut().zip(input) {
                    *r += go * x;
                }
            }
            let mut gin = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (gi, &w) in gin.iter_mut().zip(row) {
                    *gi += go * w as f64;
                }
            }
            g = gin;
        }
        g
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            weight: self.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }
}

fn affine(layer: &Dense, x: &[f64]) -> Vec<f64> {
    (0..layer.outputs)
        .map(|o| {
            let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
            layer.bias[o] as f64 + row.iter().zip(x).map(|(&w, &v)| w as f64 * v).sum::<f64>()
        })
        .collect()
}

impl MlpGrad {
    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.weight
            .iter()
            .chain(&self.bias)
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.weight
            .iter_mut()
            .chain(self.bias.iter_mut())
            .flat_map(|v| v.iter_mut())
            .for_each(|g| *g *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&[5, 7, 3], &mut rng);
        for b in mlp.layers[0].bias.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dout = [0.3, -1.2, 0.7];
        let loss = |m: &Mlp, x: &[f64]| m.forward(x).iter().zip(&dout).map(|(a, b)| a * b).sum::<f64>();
        let mut cache = MlpCache::default();
        let y = mlp.forward_cached(&x, &mut cache);
        assert_eq!(y, mlp.forward(&x));
        let mut grad = mlp.zero_grad();
        let gx = mlp.backward(&cache, &dout, &mut grad);
        let h = 1e-6;
        for i in 0..5 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7);
        }
        // Weights are f32, so perturb by exactly representable steps.
        let hw = 2f32.powi(-12);
        for li in 0..2 {
            for k in [0, 3, mlp.layers[li].weight.len() - 1] {
                let orig = mlp.layers[li].weight[k];
                mlp.layers[li].weight[k] = orig + hw;
                let lp = loss(&mlp, &x);
                mlp.layers[li].weight[k] = orig - hw;
                let lm = loss(&mlp, &x);
                mlp.layers[li].weight[k] = orig;
                let fd = (lp - lm) / (2.0 * hw as f64);
                assert!((fd - grad.weight[li][k]).abs() < 1e-5, "{fd} vs {}", grad.weight[li][k]);
            }
        }
    }

    #[test]
    fn stable_activations() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
