//! Small dense-network toolkit with hand-written backward passes.

pub mod conv;
pub mod gemm;
pub mod layers;
pub mod params;

pub use conv::{Conv2d, Shape3};
pub use layers::{LayerNorm, Linear};
pub use params::{Init, ParamBuilder, ParamRange, Params};

use rand::seq::index::sample;
use rand::Rng;

/// Adam with decoupled weight decay and global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Fourth-order central finite differences of `loss` at the given flat
/// coordinates, compared against `analytic`.
pub fn finite_difference_check(
    params: &mut Params,
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
    mut loss: impl FnMut(&Params) -> f64,
) -> GradCheck {
    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_rel_error: f64 = 0.0;
    for &i in coords {
        let orig = params.values[i];
        let mut at = |offset: f64| {
            params.values[i] = orig + offset;
            loss(params)
        };
        let (p1, m1, p2, m2) = (at(eps), at(-eps), at(2.0 * eps), at(-2.0 * eps));
        params.values[i] = orig;
        let n = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        max_rel_error = max_rel_error.max(relative_error(analytic[i], n));
        numeric.push(n);
    }
    GradCheck {
        coords: coords.to_vec(),
        analytic: coords.iter().map(|&i| analytic[i]).collect(),
        numeric,
        max_rel_error,
    }
}

/// Distinct random coordinates, at least one per named tensor when possible.
pub fn spot_coords<R: Rng>(params: &Params, count: usize, rng: &mut R) -> Vec<usize> {
    let mut coords: Vec<usize> = params
        .entries
        .iter()
        .take(count)
        .map(|e| e.range.offset + rng.gen_range(0..e.range.len))
        .collect();
    let remaining = count.saturating_sub(coords.len()).min(params.len());
    for i in sample(rng, params.len(), remaining) {
        if !coords.contains(&i) {
            coords.push(i);
        }
    }
    coords.sort_unstable();
    coords.dedup();
    coords
}
