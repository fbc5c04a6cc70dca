//! Single-keypoint gripper locator.
//!
//! The heuristic mode takes the centroid of gripper-colored pixels. The
//! learned mode is a small GELU conv net: a strided conv, a 3×3 conv, a 1×1
//! heatmap head read out with a soft-argmax, and a confidence head on
//! globally pooled features.

use std::io::Cursor;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{BlobReader, BlobWriter};
use crate::encoder::split_stride;
use crate::error::{Error, Result};
use crate::imaging::{Image, PixelPoint, CHANNELS};
use crate::nn::layers::{gelu_backward_inplace, gelu_vec, sigmoid, softmax_inplace};
use crate::nn::{self, Adam, Conv2d, GradCheck, Linear, ParamBuilder, Params, Shape3};
use crate::scene::render::GRIPPER_RGB;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const DETECTOR_MAGIC: &[u8; 8] = b"OATDETC1";
const DETECTOR_VERSION: u32 = 1;
const HIDDEN: usize = 16;
/// Matched gripper pixels (at 112 px) that count as full confidence.
const HEURISTIC_FULL_PIXELS: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointPrediction {
    pub point: Option<PixelPoint>,
    pub confidence: f64,
}

impl KeypointPrediction {
    pub fn none() -> Self {
        Self {
            point: None,
            confidence: 0.0,
        }
    }

    fn thresholded(point: PixelPoint, confidence: f64, threshold: f64) -> Self {
        Self {
            point: (confidence >= threshold).then_some(point),
            confidence,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorMode {
    Heuristic,
    Learned,
}

impl DetectorMode {
    pub fn name(self) -> &'static str {
        match self {
            DetectorMode::Heuristic => "heuristic",
            DetectorMode::Learned => "learned",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectorNet {
    pub image_size: usize,
    pub params: Params,
    c1: Conv2d,
    c2: Conv2d,
    heat: Linear,
    conf: Linear,
}

struct NetCache {
    col1: Vec<f64>,
    pre1: Vec<f64>,
    col2: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    probs: Vec<f64>,
    pooled: Vec<f64>,
    u: f64,
    v: f64,
    confidence: f64,
}

impl DetectorNet {
    pub fn new(image_size: usize, patch_size: usize, seed: u64) -> Result<Self> {
        let (stride, _) = split_stride(patch_size);
        if image_size == 0 || !image_size.is_multiple_of(stride) {
            return Err(Error::Parameter(format!("image size {image_size} not divisible by {stride}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new();
        let c1 = Conv2d::new(&mut pb, "det.conv1", CHANNELS, HIDDEN, stride, stride, 0, &mut rng);
        let c2 = Conv2d::new(&mut pb, "det.conv2", HIDDEN, HIDDEN, 3, 1, 1, &mut rng);
        let heat = Linear::with_init(&mut pb, "det.heat", HIDDEN, 1, nn::Init::Zeros, &mut rng);
        let conf = Linear::new(&mut pb, "det.conf", HIDDEN, 1, &mut rng);
        Ok(Self {
            image_size,
            params: pb.finish(),
            c1,
            c2,
            heat,
            conf,
        })
    }

    fn shapes(&self) -> (Shape3, Shape3) {
        let s0 = Shape3 {
            h: self.image_size,
            w: self.image_size,
            c: CHANNELS,
        };
        (s0, self.c1.out_shape(s0))
    }

    fn stride(&self) -> f64 {
        self.c1.stride as f64
    }

    fn forward(&self, img: &Image) -> Result<NetCache> {
        if img.height() != self.image_size || img.width() != self.image_size {
            return Err(Error::Shape(format!(
                "detector expects {0}x{0} images, got {1}x{2}",
                self.image_size,
                img.height(),
                img.width()
            )));
        }
        let p = &self.params;
        let (s0, s1) = self.shapes();
        let (pre1, col1) = self.c1.forward(p, img.data(), s0);
        let (pre2, col2) = self.c2.forward(p, &gelu_vec(&pre1), s1);
        let h2 = gelu_vec(&pre2);
        let cells = s1.h * s1.w;
        let mut probs = self.heat.forward(p, &h2, cells);
        softmax_inplace(&mut probs);
        let st = self.stride();
        let (mut u, mut v) = (0.0, 0.0);
        for (i, &pr) in probs.iter().enumerate() {
            u += pr * ((i % s1.w) as f64 + 0.5) * st;
            v += pr * ((i / s1.w) as f64 + 0.5) * st;
        }
        let mut pooled = vec![0.0; HIDDEN];
        for row in h2.chunks_exact(HIDDEN) {
            for (a, b) in pooled.iter_mut().zip(row) {
                *a += b / cells as f64;
            }
        }
        let confidence = sigmoid(self.conf.forward(p, &pooled, 1)[0]);
        Ok(NetCache {
            col1,
            pre1,
            col2,
            pre2,
            h2,
            probs,
            pooled,
            u,
            v,
            confidence,
        })
    }

    /// Loss for one frame; accumulates gradients when `grads` is given.
    fn loss(&self, img: &Image, target: Option<PixelPoint>, patch_size: usize, grads: Option<&mut [f64]>) -> Result<f64> {
        let c = self.forward(img)?;
        let y = if target.is_some() { 1.0 } else { 0.0 };
        let conf_eps = 1e-12;
        let mut loss = -(y * (c.confidence + conf_eps).ln() + (1.0 - y) * (1.0 - c.confidence + conf_eps).ln());
        let norm = (patch_size * patch_size) as f64;
        if let Some(t) = target {
            loss += ((c.u - t.u).powi(2) + (c.v - t.v).powi(2)) / norm;
        }
        let Some(grads) = grads else {
            return Ok(loss);
        };
        let p = &self.params;
        let (s0, s1) = self.shapes();
        let cells = s1.h * s1.w;
        let st = self.stride();
        let mut dh2 = vec![0.0; cells * HIDDEN];
        if let Some(t) = target {
            let (du, dv) = (2.0 * (c.u - t.u) / norm, 2.0 * (c.v - t.v) / norm);
            let mut dz = vec![0.0; cells];
            for (i, &pr) in c.probs.iter().enumerate() {
                let cu = ((i % s1.w) as f64 + 0.5) * st;
                let cv = ((i / s1.w) as f64 + 0.5) * st;
                dz[i] = pr * (du * (cu - c.u) + dv * (cv - c.v));
            }
            self.heat.backward_into(p, &c.h2, &dz, cells, grads, &mut dh2);
        }
        // d(BCE)/d(logit) = confidence - y.
        let dlogit = [c.confidence - y];
        let dpooled = self.conf.backward(p, &c.pooled, &dlogit, 1, grads);
        for row in dh2.chunks_exact_mut(HIDDEN) {
            for (d, g) in row.iter_mut().zip(&dpooled) {
                *d += g / cells as f64;
            }
        }
        gelu_backward_inplace(&c.pre2, &mut dh2);
        let mut dh1 = self.c2.backward(p, &c.col2, &dh2, s1, grads, true).unwrap();
        gelu_backward_inplace(&c.pre1, &mut dh1);
        self.c1.backward(p, &c.col1, &dh1, s0, grads, false);
        Ok(loss)
    }
}

#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub mode: DetectorMode,
    pub threshold: f64,
    pub patch_size: usize,
    pub net: Option<DetectorNet>,
}

impl DetectorParams {
    pub fn heuristic(patch_size: usize) -> Self {
        Self {
            mode: DetectorMode::Heuristic,
            threshold: DEFAULT_THRESHOLD,
            patch_size,
            net: None,
        }
    }

    pub fn learned(image_size: usize, patch_size: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            mode: DetectorMode::Learned,
            threshold: DEFAULT_THRESHOLD,
            patch_size,
            net: Some(DetectorNet::new(image_size, patch_size, seed)?),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Parameter(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        match (&self.mode, &self.net) {
            (DetectorMode::Learned, None) => Err(Error::Parameter("learned detector without weights".into())),
            (DetectorMode::Learned, Some(n)) if !n.params.all_finite() => {
                Err(Error::Parameter("detector weights are not finite".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn detect(&self, img: &Image) -> KeypointPrediction {
        match (&self.mode, &self.net) {
            (DetectorMode::Learned, Some(net)) => match net.forward(img) {
                Ok(c) => KeypointPrediction::thresholded(PixelPoint::new(c.u, c.v), c.confidence, self.threshold),
                Err(_) => KeypointPrediction::none(),
            },
            _ => heuristic_detect(img, self.threshold),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(DETECTOR_MAGIC, DETECTOR_VERSION);
        w.u8(match self.mode {
            DetectorMode::Heuristic => 0,
            DetectorMode::Learned => 1,
        });
        w.f64(self.threshold);
        w.u64(self.patch_size as u64);
        match &self.net {
            Some(net) => {
                w.u64(net.image_size as u64);
                w.f64s(&net.params.values);
            }
            None => {
                w.u64(0);
                w.f64s(&[]);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::new(Cursor::new(bytes), DETECTOR_MAGIC, DETECTOR_VERSION)?;
        let mode = match r.u8()? {
            0 => DetectorMode::Heuristic,
            1 => DetectorMode::Learned,
            m => return Err(Error::Checkpoint(format!("unknown detector mode {m}"))),
        };
        let threshold = r.f64()?;
        let patch_size = r.u64()? as usize;
        let image_size = r.u64()? as usize;
        let values = r.f64s()?;
        r.expect_end()?;
        let net = match mode {
            DetectorMode::Heuristic => None,
            DetectorMode::Learned => {
                let mut net = DetectorNet::new(image_size, patch_size, 0)?;
                if values.len() != net.params.len() {
                    return Err(Error::Checkpoint(format!(
                        "detector has {} weights, layout needs {}",
                        values.len(),
                        net.params.len()
                    )));
                }
                net.params.values = values;
                Some(net)
            }
        };
        let out = Self {
            mode,
            threshold,
            patch_size,
            net,
        };
        out.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(out)
    }
}

fn heuristic_detect(img: &Image, threshold: f64) -> KeypointPrediction {
    let target = GRIPPER_RGB.map(|c| c as f64 / 255.0);
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
    for v in 0..img.height() {
        for u in 0..img.width() {
            let p = img.pixel(u, v);
            if p.iter().zip(&target).all(|(a, b)| (a - b).abs() < 0.05) {
                su += u as f64 + 0.5;
                sv += v as f64 + 0.5;
                n += 1;
            }
        }
    }
    if n == 0 {
        return KeypointPrediction::none();
    }
    let scale = (img.width() as f64 / 112.0).powi(2);
    let confidence = (n as f64 / (HEURISTIC_FULL_PIXELS * scale)).min(1.0);
    KeypointPrediction::thresholded(PixelPoint::new(su / n as f64, sv / n as f64), confidence, threshold)
}

/// One labeled frame. `keypoint` is `None` for gripper-free renders.
#[derive(Clone, Debug)]
pub struct DetectorSample {
    pub image: Image,
    pub keypoint: Option<PixelPoint>,
}

#[derive(Clone, Debug)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 8,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorMetrics {
    pub frames: usize,
    pub positives: usize,
    /// Median pixel error over detected positive frames.
    pub median_error: f64,
    /// Positive frames detected within `patch_size / 2` pixels.
    pub hit_rate: f64,
    /// Positive frames reported as no-detection.
    pub miss_rate: f64,
    /// Negative frames reported as a detection.
    pub false_positive_rate: f64,
}

#[derive(Clone, Debug)]
pub struct DetectorReport {
    pub params: DetectorParams,
    pub losses: Vec<f64>,
    pub holdout: Option<DetectorMetrics>,
}

pub fn train_detector(
    train: &[DetectorSample],
    holdout: &[DetectorSample],
    image_size: usize,
    patch_size: usize,
    cfg: &DetectorTrainConfig,
) -> Result<DetectorReport> {
    if train.is_empty() {
        return Err(Error::Data("detector training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut det = DetectorParams::learned(image_size, patch_size, cfg.seed)?;
    let net = det.net.as_mut().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD57E_C702);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Adam::new(net.params.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = net.params.zeros_like();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &train[order[cursor]];
            cursor += 1;
            total += net.loss(&s.image, s.keypoint, patch_size, Some(&mut grads))?;
        }
        let scale = 1.0 / cfg.batch as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "detector loss".into(),
            });
        }
        losses.push(loss);
        opt.update(&mut net.params.values, &grads, cfg.lr);
    }
    let holdout = (!holdout.is_empty()).then(|| eval_detector(&det, holdout));
    Ok(DetectorReport {
        params: det,
        losses,
        holdout,
    })
}

pub fn eval_predictions(preds: &[KeypointPrediction], truth: &[Option<PixelPoint>], patch_size: usize) -> DetectorMetrics {
    let mut errors = Vec::new();
    let (mut positives, mut hits, mut misses, mut negatives, mut false_pos) = (0, 0, 0, 0, 0);
    for (p, t) in preds.iter().zip(truth) {
        match (t, p.point) {
            (Some(t), Some(q)) => {
                positives += 1;
                let e = t.distance(&q);
                if e < patch_size as f64 / 2.0 {
                    hits += 1;
                }
                errors.push(e);
            }
            (Some(_), None) => {
                positives += 1;
                misses += 1;
            }
            (None, q) => {
                negatives += 1;
                if q.is_some() {
                    false_pos += 1;
                }
            }
        }
    }
    errors.sort_by(f64::total_cmp);
    let median_error = match errors.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => errors[n / 2],
        n => 0.5 * (errors[n / 2 - 1] + errors[n / 2]),
    };
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    DetectorMetrics {
        frames: preds.len(),
        positives,
        median_error,
        hit_rate: frac(hits, positives),
        miss_rate: frac(misses, positives),
        false_positive_rate: frac(false_pos, negatives),
    }
}

pub fn eval_detector(det: &DetectorParams, samples: &[DetectorSample]) -> DetectorMetrics {
    let preds: Vec<KeypointPrediction> = samples.iter().map(|s| det.detect(&s.image)).collect();
    let truth: Vec<Option<PixelPoint>> = samples.iter().map(|s| s.keypoint).collect();
    eval_predictions(&preds, &truth, det.patch_size)
}

/// Finite-difference check of the learned detector on a positive and a
/// negative frame.
pub fn detector_grad_check(det: &DetectorParams, samples: &[DetectorSample], seed: u64, coords: usize) -> Result<GradCheck> {
    let net = det
        .net
        .as_ref()
        .ok_or_else(|| Error::Parameter("gradient check needs the learned detector".into()))?;
    let ps = det.patch_size;
    let mut grads = net.params.zeros_like();
    for s in samples {
        net.loss(&s.image, s.keypoint, ps, Some(&mut grads))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = nn::spot_coords(&net.params, coords, &mut rng);
    let mut probe = net.clone();
    let mut params = std::mem::take(&mut probe.params);
    Ok(nn::finite_difference_check(&mut params, &grads, &picks, 1e-4, |p| {
        probe.params = p.clone();
        samples.iter().map(|s| probe.loss(&s.image, s.keypoint, ps, None).unwrap()).sum()
    }))
}

/// Gripper-free and gripper frames from rendered scenes.
pub fn samples_from_states<'a>(
    states: impl IntoIterator<Item = &'a crate::scene::SceneState>,
    opts: &crate::scene::RenderOptions,
    negative_every: usize,
) -> Result<Vec<DetectorSample>> {
    let mut out = Vec::new();
    let no_gripper = crate::scene::RenderOptions {
        draw_gripper: false,
        ..*opts
    };
    for (i, s) in states.into_iter().enumerate() {
        if negative_every > 0 && i % negative_every == negative_every - 1 {
            let r = crate::scene::render_with(s, &no_gripper)?;
            out.push(DetectorSample {
                image: r.image,
                keypoint: None,
            });
        } else {
            let r = crate::scene::render_with(s, opts)?;
            out.push(DetectorSample {
                image: r.image,
                keypoint: Some(r.keypoint),
            });
        }
    }
    Ok(out)
}

/// Draws a small cross at the keypoint.
pub fn overlay_keypoint(img: &Image, pred: &KeypointPrediction) -> Image {
    let mut out = img.clone();
    if let Some(p) = pred.point {
        let (cu, cv) = (p.u.floor() as i64, p.v.floor() as i64);
        for d in -4i64..=4 {
            for (u, v) in [(cu + d, cv), (cu, cv + d)] {
                if u >= 0 && v >= 0 && (u as usize) < img.width() && (v as usize) < img.height() {
                    out.set_pixel(u as usize, v as usize, [0.0, 1.0, 1.0]);
                }
            }
        }
    }
    out
}
