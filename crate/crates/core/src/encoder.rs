//! Patch feature encoders.
//!
//! `LinearFrozen` projects each patch's flattened pixels with a fixed seeded
//! matrix, so feature row `k` depends on patch `k` alone. `ConvTrained` is a
//! two-stage strided convolution (stride product = patch size) trained end to
//! end with the policy. Both may append two fixed coordinate channels
//! (normalized patch column and row) so pooled tokens keep their location.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{Image, PatchGeometry, CHANNELS};
use crate::nn::{self, layers::{gelu_backward_inplace, gelu_vec}, Conv2d, GradCheck, Init, ParamBuilder, ParamRange, Params, Shape3};

pub const POSITION_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderMode {
    LinearFrozen,
    ConvTrained,
}

impl EncoderMode {
    pub fn name(self) -> &'static str {
        match self {
            EncoderMode::LinearFrozen => "linear-frozen",
            EncoderMode::ConvTrained => "conv-trained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear-frozen" => Ok(Self::LinearFrozen),
            "conv-trained" => Ok(Self::ConvTrained),
            _ => Err(Error::Config(format!("unknown encoder mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub geom: PatchGeometry,
    /// Feature width `D`, including coordinate channels.
    pub dim: usize,
    pub hidden: usize,
    pub positional: bool,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(mode: EncoderMode, geom: PatchGeometry) -> Self {
        Self {
            mode,
            geom,
            dim: 64,
            hidden: 16,
            positional: true,
            seed: 0,
        }
    }

    fn learned_dim(&self) -> usize {
        self.dim - if self.positional { POSITION_CHANNELS } else { 0 }
    }
}

/// Strides of the two conv stages: the smallest divisor `>= sqrt(ps)`, then the rest.
pub(crate) fn split_stride(ps: usize) -> (usize, usize) {
    let first = (1..=ps).find(|d| ps.is_multiple_of(*d) && d * d >= ps).unwrap_or(ps);
    (first, ps / first)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureGrid {
    pub geom: PatchGeometry,
    pub dim: usize,
    /// `K × D`, row-major by patch index.
    pub features: Vec<f64>,
}

impl PatchFeatureGrid {
    pub fn new(geom: PatchGeometry, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != geom.k() * dim {
            return Err(Error::Shape(format!(
                "{} values for {} patches of width {dim}",
                features.len(),
                geom.k()
            )));
        }
        Ok(Self { geom, dim, features })
    }

    pub fn k(&self) -> usize {
        self.geom.k()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.features[k * self.dim..(k + 1) * self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.features.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug)]
enum Layers {
    Linear { w: ParamRange, b: ParamRange },
    Conv { c1: Conv2d, c2: Conv2d },
}

#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub config: EncoderConfig,
    pub params: Params,
    layers: Layers,
}

pub struct EncoderCache {
    col1: Vec<f64>,
    pre1: Vec<f64>,
    col2: Vec<f64>,
}

impl FeatureEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.dim <= if config.positional { POSITION_CHANNELS } else { 0 } {
            return Err(Error::Parameter(format!("feature width {} too small", config.dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder::new();
        let ps = config.geom.patch_size;
        let out = config.learned_dim();
        let layers = match config.mode {
            EncoderMode::LinearFrozen => {
                let fan_in = ps * ps * CHANNELS;
                let w = pb.add("proj.weight", &[out, fan_in], Init::FanIn(fan_in), &mut rng);
                let b = pb.add("proj.bias", &[out], Init::Zeros, &mut rng);
                Layers::Linear { w, b }
            }
            EncoderMode::ConvTrained => {
                let (s1, s2) = split_stride(ps);
                let c1 = Conv2d::new(&mut pb, "conv1", CHANNELS, config.hidden, s1, s1, 0, &mut rng);
                let c2 = Conv2d::new(&mut pb, "conv2", config.hidden, out, s2, s2, 0, &mut rng);
                Layers::Conv { c1, c2 }
            }
        };
        Ok(Self {
            config,
            params: pb.finish(),
            layers,
        })
    }

    pub fn trainable(&self) -> bool {
        self.config.mode == EncoderMode::ConvTrained
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let g = &self.config.geom;
        if img.height() != g.height() || img.width() != g.width() {
            return Err(Error::Shape(format!(
                "image is {}x{}, encoder expects {}x{}",
                img.height(),
                img.width(),
                g.height(),
                g.width()
            )));
        }
        Ok(())
    }

    fn append_positions(&self, learned: &[f64]) -> Vec<f64> {
        let g = &self.config.geom;
        let (d, ld) = (self.config.dim, self.config.learned_dim());
        let mut out = vec![0.0; g.k() * d];
        for k in 0..g.k() {
            out[k * d..k * d + ld].copy_from_slice(&learned[k * ld..(k + 1) * ld]);
            if self.config.positional {
                let p = g.unflat(k);
                out[k * d + ld] = 2.0 * (p.col as f64 + 0.5) / g.grid_w as f64 - 1.0;
                out[k * d + ld + 1] = 2.0 * (p.row as f64 + 0.5) / g.grid_h as f64 - 1.0;
            }
        }
        out
    }

    pub fn encode(&self, img: &Image) -> Result<PatchFeatureGrid> {
        Ok(self.forward(img)?.0)
    }

    pub fn forward(&self, img: &Image) -> Result<(PatchFeatureGrid, EncoderCache)> {
        self.check_image(img)?;
        let g = self.config.geom;
        let p = &self.params;
        let s = Shape3 {
            h: img.height(),
            w: img.width(),
            c: CHANNELS,
        };
        let (learned, cache) = match &self.layers {
            Layers::Linear { w, b } => {
                let ps = g.patch_size;
                let fan_in = ps * ps * CHANNELS;
                let ld = self.config.learned_dim();
                let mut col = vec![0.0; g.k() * fan_in];
                for k in 0..g.k() {
                    let pi = g.unflat(k);
                    for dy in 0..ps {
                        let src = ((pi.row * ps + dy) * s.w + pi.col * ps) * CHANNELS;
                        let dst = k * fan_in + dy * ps * CHANNELS;
                        col[dst..dst + ps * CHANNELS].copy_from_slice(&img.data()[src..src + ps * CHANNELS]);
                    }
                }
                let mut y = Vec::with_capacity(g.k() * ld);
                for _ in 0..g.k() {
                    y.extend_from_slice(p.get(*b));
                }
                nn::gemm::matmul_bt(g.k(), fan_in, ld, &col, p.get(*w), &mut y, true);
                (
                    y,
                    EncoderCache {
                        col1: Vec::new(),
                        pre1: Vec::new(),
                        col2: Vec::new(),
                    },
                )
            }
            Layers::Conv { c1, c2 } => {
                let (pre1, col1) = c1.forward(p, img.data(), s);
                let (y, col2) = c2.forward(p, &gelu_vec(&pre1), c1.out_shape(s));
                (y, EncoderCache { col1, pre1, col2 })
            }
        };
        let grid = PatchFeatureGrid::new(g, self.config.dim, self.append_positions(&learned))?;
        Ok((grid, cache))
    }

    /// Accumulates parameter gradients for `d(features)`. No-op when frozen.
    pub fn backward(&self, cache: &EncoderCache, dfeatures: &[f64], grads: &mut [f64]) {
        let Layers::Conv { c1, c2 } = &self.layers else {
            return;
        };
        let g = self.config.geom;
        let (d, ld) = (self.config.dim, self.config.learned_dim());
        let mut dy = vec![0.0; g.k() * ld];
        for k in 0..g.k() {
            dy[k * ld..(k + 1) * ld].copy_from_slice(&dfeatures[k * d..k * d + ld]);
        }
        let s = Shape3 {
            h: g.height(),
            w: g.width(),
            c: CHANNELS,
        };
        let s1 = c1.out_shape(s);
        let mut dh1 = c2.backward(&self.params, &cache.col2, &dy, s1, grads, true).unwrap();
        gelu_backward_inplace(&cache.pre1, &mut dh1);
        c1.backward(&self.params, &cache.col1, &dh1, s, grads, false);
    }

    /// Zeroes the projection bias (linear-frozen) for analyzable tests.
    pub fn zero_bias(&mut self) {
        let ranges: Vec<ParamRange> = self
            .params
            .entries
            .iter()
            .filter(|e| e.name.ends_with(".bias"))
            .map(|e| e.range)
            .collect();
        for r in ranges {
            self.params.values[r.range()].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Finite-difference check of the conv encoder under a random linear loss.
pub fn encoder_grad_check(encoder: &FeatureEncoder, seed: u64, coords: usize) -> Result<GradCheck> {
    if !encoder.trainable() {
        return Err(Error::Parameter("gradient check needs the conv-trained encoder".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = encoder.config.geom;
    let img = Image::new(
        g.height(),
        g.width(),
        (0..g.height() * g.width() * CHANNELS).map(|_| rng.gen::<f64>()).collect(),
    )?;
    let weights: Vec<f64> = (0..g.k() * encoder.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |enc: &FeatureEncoder| -> f64 {
        let f = enc.encode(&img).unwrap();
        f.features.iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = encoder.forward(&img)?;
    let mut grads = encoder.params.zeros_like();
    encoder.backward(&cache, &weights, &mut grads);
    let picks = nn::spot_coords(&encoder.params, coords, &mut rng);
    let mut probe = encoder.clone();
    let mut params = std::mem::take(&mut probe.params);
    let check = nn::finite_difference_check(&mut params, &grads, &picks, 1e-4, |p| {
        probe.params = p.clone();
        loss(&probe)
    });
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> PatchGeometry {
        PatchGeometry::new(112, 112, 14).unwrap()
    }

    fn linear(positional: bool) -> FeatureEncoder {
        let mut cfg = EncoderConfig::new(EncoderMode::LinearFrozen, geom());
        cfg.positional = positional;
        FeatureEncoder::new(cfg).unwrap()
    }

    #[test]
    fn zero_image_zero_features() {
        let mut enc = linear(false);
        enc.zero_bias();
        let f = enc.encode(&Image::zeros(112, 112)).unwrap();
        assert!(f.features.iter().all(|&x| x == 0.0));
        assert_eq!((f.k(), f.dim), (64, 64));
    }

    #[test]
    fn linear_locality() {
        let enc = linear(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Image::new(112, 112, (0..112 * 112 * 3).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let fa = enc.encode(&base).unwrap();
        for target in [0usize, 9, 63] {
            let mut img = base.clone();
            let p = geom().unflat(target);
            for v in p.row * 14..p.row * 14 + 14 {
                for u in p.col * 14..p.col * 14 + 14 {
                    img.set_pixel(u, v, [rng.gen(), rng.gen(), rng.gen()]);
                }
            }
            let fb = enc.encode(&img).unwrap();
            for k in 0..64 {
                if k == target {
                    assert_ne!(fa.row(k), fb.row(k));
                } else {
                    assert_eq!(fa.row(k), fb.row(k));
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = EncoderConfig::new(EncoderMode::ConvTrained, geom());
        let a = FeatureEncoder::new(cfg).unwrap();
        let b = FeatureEncoder::new(cfg).unwrap();
        let img = Image::new(112, 112, vec![0.25; 112 * 112 * 3]).unwrap();
        assert_eq!(a.encode(&img).unwrap(), b.encode(&img).unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        let enc = linear(true);
        assert!(matches!(enc.encode(&Image::zeros(56, 56)), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_gradients() {
        let mut cfg = EncoderConfig::new(EncoderMode::ConvTrained, geom());
        cfg.seed = 0;
        let enc = FeatureEncoder::new(cfg).unwrap();
        let check = encoder_grad_check(&enc, 0, 5).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn gradient_scales_with_loss() {
        let enc = FeatureEncoder::new(EncoderConfig::new(EncoderMode::ConvTrained, geom())).unwrap();
        let img = Image::new(112, 112, vec![0.5; 112 * 112 * 3]).unwrap();
        let (_, cache) = enc.forward(&img).unwrap();
        let d: Vec<f64> = (0..64 * 64).map(|i| ((i % 7) as f64 - 3.0) * 0.1).collect();
        let mut g1 = enc.params.zeros_like();
        enc.backward(&cache, &d, &mut g1);
        let d3: Vec<f64> = d.iter().map(|x| 3.0 * x).collect();
        let mut g3 = enc.params.zeros_like();
        enc.backward(&cache, &d3, &mut g3);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let mut g0 = enc.params.zeros_like();
        enc.backward(&cache, &vec![0.0; 64 * 64], &mut g0);
        assert!(g0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stride_split() {
        assert_eq!(split_stride(14), (7, 2));
        assert_eq!(split_stride(1), (1, 1));
        assert_eq!(split_stride(16), (4, 4));
        assert_eq!(split_stride(7), (7, 1));
    }
}
