//! The trained bundle: perception choices, encoder, pool, policy and binning.

use std::io::Cursor;
use std::path::Path;

use crate::checkpoint::{BlobReader, BlobWriter};
use crate::encoder::{EncoderConfig, EncoderMode, FeatureEncoder};
use crate::error::{Error, IoContext, Result};
use crate::gripper::{DetectorParams, KeypointPrediction};
use crate::imaging::{Image, PatchGeometry, PixelPoint};
use crate::nn::Params;
use crate::policy::{predict_action, ActionBinning, Policy, PolicyConfig, Vocabulary, ACTION_DIM};
use crate::scene::{Action, Instruction};
use crate::segment::{segment_oracle, segment_unsupervised, MaskSet};
use crate::tokenizer::{tokenize, AttentionPool, PoolMode, TokenizerConfig, TokenizerMode, VisualTokens};

use super::config::{DetectorKind, SegmenterKind, TrainConfig};

pub const MODEL_MAGIC: &[u8; 8] = b"OATMODL1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Model {
    pub tokenizer: TokenizerConfig,
    pub segmenter: SegmenterKind,
    pub detector_kind: DetectorKind,
    /// Weights for the learned or heuristic detector; `None` for the oracle.
    pub detector: Option<DetectorParams>,
    pub encoder: FeatureEncoder,
    pub pool: Option<AttentionPool>,
    pub policy: Policy,
    pub binning: ActionBinning,
}

/// Derived seeds so components never share an RNG stream.
fn component_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

impl Model {
    pub fn new(cfg: &TrainConfig, detector: Option<DetectorParams>, binning: ActionBinning) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = cfg.tokenizer()?;
        let detector_kind = cfg.detector_kind()?;
        if detector_kind != DetectorKind::Oracle && detector.is_none() {
            return Err(Error::Config(format!("{} detector needs parameters", detector_kind.name())));
        }
        let mut enc_cfg = EncoderConfig::new(cfg.encoder_mode()?, cfg.geometry()?);
        enc_cfg.dim = cfg.dim;
        enc_cfg.hidden = cfg.encoder_hidden;
        enc_cfg.seed = component_seed(cfg.seed, 1);
        let pool = AttentionPool::for_config(&tokenizer, component_seed(cfg.seed, 2));
        let policy = Policy::new(cfg.policy(component_seed(cfg.seed, 3)), Vocabulary::for_grammar(cfg.bins))?;
        if binning.bins != cfg.bins {
            return Err(Error::Config(format!("binning has {} bins, config {}", binning.bins, cfg.bins)));
        }
        Ok(Self {
            tokenizer,
            segmenter: cfg.segmenter_kind()?,
            detector_kind,
            detector: match detector_kind {
                DetectorKind::Oracle => None,
                _ => detector.map(|d| DetectorParams {
                    threshold: cfg.detector_tau,
                    ..d
                }),
            },
            encoder: FeatureEncoder::new(enc_cfg)?,
            pool,
            policy,
            binning,
        })
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.encoder.config.geom
    }

    /// Segmentation masks and keypoint for a frame; the ground truth is only
    /// read by the oracle variants.
    pub fn perceive(&self, img: &Image, gt_masks: &MaskSet, gt_keypoint: PixelPoint) -> Result<(MaskSet, KeypointPrediction)> {
        let geom = self.geometry();
        let n = self.tokenizer.n_slots;
        let masks = match self.segmenter {
            SegmenterKind::Unsupervised => segment_unsupervised(img, &geom, n)?,
            SegmenterKind::Oracle => segment_oracle(gt_masks, &geom, n)?,
        };
        let kp = match (&self.detector_kind, &self.detector) {
            (DetectorKind::Oracle, _) => KeypointPrediction {
                point: Some(gt_keypoint),
                confidence: 1.0,
            },
            (_, Some(d)) => d.detect(img),
            (_, None) => KeypointPrediction::none(),
        };
        Ok((masks, kp))
    }

    pub fn visual_tokens(&self, img: &Image, masks: &MaskSet, kp: &KeypointPrediction) -> Result<VisualTokens> {
        let feats = self.encoder.encode(img)?;
        tokenize(&feats, masks, kp, &self.tokenizer, self.pool.as_ref())
    }

    pub fn act(&self, ins: &Instruction, img: &Image, masks: &MaskSet, kp: &KeypointPrediction) -> Result<Action> {
        let tokens = self.visual_tokens(img, masks, kp)?;
        let prefix = self.policy.vocab.encode_instruction(ins)?;
        predict_action(&self.policy, &prefix, &tokens.tokens, &self.binning)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(MODEL_MAGIC, MODEL_VERSION);
        let t = &self.tokenizer;
        w.str(t.mode.name());
        w.u64(t.n_slots as u64);
        w.u64(t.grid_side as u64);
        w.str(t.pool.name());
        w.u64(t.dim as u64);

        w.str(self.segmenter.name());
        w.str(self.detector_kind.name());
        w.bytes(&self.detector.as_ref().map(|d| d.to_bytes()).unwrap_or_default());

        let e = &self.encoder.config;
        w.str(e.mode.name());
        w.usizes(&[e.geom.height(), e.geom.width(), e.geom.patch_size, e.dim, e.hidden]);
        w.u8(e.positional as u8);
        w.u64(e.seed);
        w.f64s(&self.encoder.params.values);

        match &self.pool {
            Some(p) => {
                w.u8(1);
                w.usizes(&[p.n_queries, p.dim]);
                w.f64s(&p.params.values);
            }
            None => w.u8(0),
        }

        let c = &self.policy.config;
        w.usizes(&[c.layers, c.width, c.heads, c.mlp_ratio, c.visual_dim, c.max_len]);
        w.u64(c.seed);
        w.u64(self.policy.vocab.words().len() as u64);
        for word in self.policy.vocab.words() {
            w.str(word);
        }
        w.u64(self.policy.vocab.bins() as u64);
        w.f64s(&self.policy.params.values);

        w.u64(self.binning.bins as u64);
        match self.binning.ranges() {
            Ok((lo, hi)) => {
                w.u8(1);
                w.f64s(&lo);
                w.f64s(&hi);
            }
            Err(_) => w.u8(0),
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: Error| Error::Checkpoint(e.to_string());
        let mut r = BlobReader::new(Cursor::new(bytes), MODEL_MAGIC, MODEL_VERSION)?;
        let tokenizer = TokenizerConfig {
            mode: TokenizerMode::parse(&r.str()?).map_err(bad)?,
            n_slots: r.usize()?,
            grid_side: r.usize()?,
            pool: PoolMode::parse(&r.str()?).map_err(bad)?,
            dim: r.usize()?,
        };
        tokenizer.validate().map_err(bad)?;

        let segmenter = SegmenterKind::parse(&r.str()?).map_err(bad)?;
        let detector_kind = DetectorKind::parse(&r.str()?).map_err(bad)?;
        let det_bytes = r.bytes()?;
        let detector = if detector_kind == DetectorKind::Oracle {
            None
        } else {
            Some(DetectorParams::from_bytes(&det_bytes)?)
        };

        let mode = EncoderMode::parse(&r.str()?).map_err(bad)?;
        let dims = r.usizes()?;
        let [h, wd, ps, dim, hidden] = dims[..] else {
            return Err(Error::Checkpoint("encoder header".into()));
        };
        let mut ecfg = EncoderConfig::new(mode, PatchGeometry::new(h, wd, ps).map_err(bad)?);
        ecfg.dim = dim;
        ecfg.hidden = hidden;
        ecfg.positional = r.u8()? != 0;
        ecfg.seed = r.u64()?;
        let mut encoder = FeatureEncoder::new(ecfg).map_err(bad)?;
        load_values(&mut encoder.params, r.f64s()?, "encoder")?;

        let pool = match r.u8()? {
            0 => None,
            _ => {
                let d = r.usizes()?;
                let [n, pd] = d[..] else {
                    return Err(Error::Checkpoint("pool header".into()));
                };
                let mut p = AttentionPool::new(n, pd, 0);
                load_values(&mut p.params, r.f64s()?, "pool")?;
                Some(p)
            }
        };

        let d = r.usizes()?;
        let [layers, width, heads, mlp_ratio, visual_dim, max_len] = d[..] else {
            return Err(Error::Checkpoint("policy header".into()));
        };
        let pcfg = PolicyConfig {
            layers,
            width,
            heads,
            mlp_ratio,
            visual_dim,
            max_len,
            seed: r.u64()?,
        };
        let n_words = r.usize()?;
        let words = (0..n_words).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::new(words, r.usize()?).map_err(bad)?;
        let mut policy = Policy::new(pcfg, vocab).map_err(bad)?;
        load_values(&mut policy.params, r.f64s()?, "policy")?;

        let bins = r.usize()?;
        let binning = match r.u8()? {
            0 => ActionBinning::unfitted(bins),
            _ => {
                let (lo, hi) = (r.f64s()?, r.f64s()?);
                let arr = |v: Vec<f64>| -> Result<[f64; ACTION_DIM]> {
                    v.try_into().map_err(|_| Error::Checkpoint("binning range length".into()))
                };
                ActionBinning::from_ranges(bins, arr(lo)?, arr(hi)?).map_err(bad)?
            }
        };
        r.expect_end()?;
        if tokenizer.dim != encoder.dim() || tokenizer.dim != policy.config.visual_dim {
            return Err(Error::Checkpoint("token width disagrees between components".into()));
        }
        if tokenizer.pool_queries().is_some() != pool.is_some() {
            return Err(Error::Checkpoint("attention pool presence disagrees with tokenizer".into()));
        }
        Ok(Self {
            tokenizer,
            segmenter,
            detector_kind,
            detector,
            encoder,
            pool,
            policy,
            binning,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }
}

pub(crate) fn load_values(params: &mut Params, values: Vec<f64>, what: &str) -> Result<()> {
    if values.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{what} has {} values, layout needs {}",
            values.len(),
            params.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint(format!("{what} holds non-finite values")));
    }
    params.values = values;
    Ok(())
}
