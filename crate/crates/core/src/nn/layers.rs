use rand::Rng;

use super::gemm::{matmul, matmul_at, matmul_bt};
use super::params::{split_pair, Init, ParamBuilder, ParamRange, Params};

/// Dense layer `y = x Wᵀ + b`, `W: out×in`. Bias is stored directly after
/// the weight.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamRange,
    pub b: ParamRange,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let w = pb.add(&format!("{name}.weight"), &[output, input], Init::FanIn(input), rng);
        let b = pb.add(&format!("{name}.bias"), &[output], Init::Zeros, rng);
        Self { w, b, input, output }
    }

    pub fn with_init<R: Rng>(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, init: Init, rng: &mut R) -> Self {
        let w = pb.add(&format!("{name}.weight"), &[output, input], init, rng);
        let b = pb.add(&format!("{name}.bias"), &[output], Init::Zeros, rng);
        Self { w, b, input, output }
    }

    /// `x: rows×input` → `rows×output`.
    pub fn forward(&self, p: &Params, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(rows * self.output);
        let b = p.get(self.b);
        for _ in 0..rows {
            y.extend_from_slice(b);
        }
        matmul_bt(rows, self.input, self.output, x, p.get(self.w), &mut y, true);
        y
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, p: &Params, x: &[f64], dy: &[f64], rows: usize, grads: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; rows * self.input];
        self.backward_into(p, x, dy, rows, grads, &mut dx);
        dx
    }

    pub fn backward_into(&self, p: &Params, x: &[f64], dy: &[f64], rows: usize, grads: &mut [f64], dx: &mut [f64]) {
        self.backward_params(x, dy, rows, grads);
        matmul(rows, self.output, self.input, dy, p.get(self.w), dx, true);
    }

    pub fn backward_params(&self, x: &[f64], dy: &[f64], rows: usize, grads: &mut [f64]) {
        let (gw, gb) = split_pair(grads, self.w, self.b);
        matmul_at(rows, self.output, self.input, dy, x, gw, true);
        for r in 0..rows {
            for (g, d) in gb.iter_mut().zip(&dy[r * self.output..(r + 1) * self.output]) {
                *g += d;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamRange,
    pub bias: ParamRange,
    pub dim: usize,
}

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder, name: &str, dim: usize, rng: &mut R) -> Self {
        let gain = pb.add(&format!("{name}.gain"), &[dim], Init::Ones, rng);
        let bias = pb.add(&format!("{name}.bias"), &[dim], Init::Zeros, rng);
        Self { gain, bias, dim }
    }

    pub fn forward(&self, p: &Params, x: &[f64], rows: usize) -> (Vec<f64>, LayerNormCache) {
        let d = self.dim;
        let (g, b) = (p.get(self.gain), p.get(self.bias));
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for i in 0..d {
                let h = (row[i] - mean) * s;
                xhat[r * d + i] = h;
                y[r * d + i] = h * g[i] + b[i];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, p: &Params, cache: &LayerNormCache, dy: &[f64], rows: usize, grads: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        let g = p.get(self.gain);
        let (gg, gb) = split_pair(grads, self.gain, self.bias);
        let mut dx = vec![0.0; rows * d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            let mut mean_dh = 0.0;
            let mut mean_dh_xh = 0.0;
            for i in 0..d {
                gg[i] += dyr[i] * xh[i];
                gb[i] += dyr[i];
                let dh = dyr[i] * g[i];
                mean_dh += dh;
                mean_dh_xh += dh * xh[i];
            }
            mean_dh /= d as f64;
            mean_dh_xh /= d as f64;
            let s = cache.rstd[r];
            for i in 0..d {
                let dh = dyr[i] * g[i];
                dx[r * d + i] = s * (dh - mean_dh - xh[i] * mean_dh_xh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_vec(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&x| gelu(x)).collect()
}

/// `d *= gelu'(pre)` elementwise.
pub fn gelu_backward_inplace(pre: &[f64], d: &mut [f64]) {
    for (g, &x) in d.iter_mut().zip(pre) {
        *g *= gelu_grad(x);
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// In-place numerically stable softmax.
pub fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Backward of softmax: `dz_i = p_i (dp_i - Σ_j p_j dp_j)`.
pub fn softmax_backward(p: &[f64], dp: &[f64], dz: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for i in 0..p.len() {
        dz[i] = p[i] * (dp[i] - dot);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
