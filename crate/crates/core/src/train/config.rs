//! Flat `key = value` run configuration.
//!
//! Every key is optional in a file; missing keys take the defaults below.
//! The config hash is the SHA-256 of the canonical serialization of the
//! fully resolved config, so two files that resolve to the same values hash
//! identically.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderMode;
use crate::error::{Error, IoContext, Result};
use crate::imaging::PatchGeometry;
use crate::policy::PolicyConfig;
use crate::tokenizer::{PoolMode, TokenizerConfig, TokenizerMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmenterKind {
    Unsupervised,
    Oracle,
}

impl SegmenterKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Unsupervised => "unsupervised",
            Self::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(Self::Unsupervised),
            "oracle" => Ok(Self::Oracle),
            _ => Err(Error::Config(format!("unknown segmenter {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorKind {
    Learned,
    Heuristic,
    Oracle,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Learned => "learned",
            Self::Heuristic => "heuristic",
            Self::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "heuristic" => Ok(Self::Heuristic),
            "oracle" => Ok(Self::Oracle),
            _ => Err(Error::Config(format!("unknown detector {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: String,
    pub detector_path: String,
    pub episodes: usize,
    pub image_size: usize,
    pub patch_size: usize,

    pub mode: String,
    pub pool: String,
    pub n_slots: usize,
    pub grid_side: usize,
    pub dim: usize,
    pub encoder: String,
    pub encoder_hidden: usize,
    pub segmenter: String,
    pub detector: String,
    /// Detector confidence below this means no gripper in view.
    pub detector_tau: f64,

    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub bins: usize,
    pub max_len: usize,

    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub schedule: String,
    pub min_lr_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub log_every: usize,
    pub probe_every: usize,
    pub probe_frames: usize,
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub max_rollout_steps: usize,

    /// Parameter initialization.
    pub seed: u64,
    /// Batch order; shared across ablation variants.
    pub order_seed: u64,
    pub data_seed: u64,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            detector_path: String::new(),
            episodes: crate::scene::dataset::DEFAULT_EPISODES,
            image_size: 112,
            patch_size: 14,
            mode: "oat".into(),
            pool: "average".into(),
            n_slots: 7,
            grid_side: 3,
            dim: 64,
            encoder: "conv-trained".into(),
            encoder_hidden: 16,
            segmenter: "unsupervised".into(),
            detector: "learned".into(),
            detector_tau: crate::gripper::DEFAULT_THRESHOLD,
            layers: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            bins: 64,
            max_len: 96,
            batch: 16,
            lr: 1e-3,
            warmup: 100,
            schedule: "cosine".into(),
            min_lr_frac: 0.1,
            weight_decay: 0.0,
            clip_norm: 1.0,
            steps: 20_000,
            log_every: 50,
            probe_every: 100,
            probe_frames: 256,
            eval_every: 1000,
            eval_rollouts: 100,
            max_rollout_steps: crate::scene::dataset::EXPERT_MAX_STEPS,
            seed: 0,
            order_seed: 0,
            data_seed: 0,
            eval_seed: 1_000_003,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `key=value` overrides through the same parser as files.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            let current = table
                .get(k)
                .ok_or_else(|| Error::Config(format!("unknown config key {k:?}")))?;
            let value = match current {
                toml::Value::String(_) => toml::Value::String(v.clone()),
                toml::Value::Integer(_) => toml::Value::Integer(
                    v.parse().map_err(|_| Error::Config(format!("{k} expects an integer, got {v:?}")))?,
                ),
                toml::Value::Float(_) => toml::Value::Float(
                    v.parse().map_err(|_| Error::Config(format!("{k} expects a number, got {v:?}")))?,
                ),
                other => return Err(Error::Config(format!("unsupported value type for {k}: {other}"))),
            };
            table.insert(k.clone(), value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episodes", self.episodes),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("n_slots", self.n_slots),
            ("grid_side", self.grid_side),
            ("dim", self.dim),
            ("encoder_hidden", self.encoder_hidden),
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("bins", self.bins),
            ("max_len", self.max_len),
            ("batch", self.batch),
            ("steps", self.steps),
            ("log_every", self.log_every),
            ("max_rollout_steps", self.max_rollout_steps),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.detector_tau > 0.0 && self.detector_tau < 1.0) {
            return Err(Error::Config(format!("detector_tau {} outside (0, 1)", self.detector_tau)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::Config("min_lr_frac must lie in [0, 1]".into()));
        }
        self.tokenizer()?.validate()?;
        self.encoder_mode()?;
        self.segmenter_kind()?;
        self.detector_kind()?;
        self.schedule_kind()?;
        self.geometry()?;
        self.policy(0).validate()?;
        Ok(())
    }

    pub fn tokenizer(&self) -> Result<TokenizerConfig> {
        Ok(TokenizerConfig {
            mode: TokenizerMode::parse(&self.mode)?,
            n_slots: self.n_slots,
            grid_side: self.grid_side,
            pool: PoolMode::parse(&self.pool)?,
            dim: self.dim,
        })
    }

    pub fn encoder_mode(&self) -> Result<EncoderMode> {
        EncoderMode::parse(&self.encoder)
    }

    pub fn segmenter_kind(&self) -> Result<SegmenterKind> {
        SegmenterKind::parse(&self.segmenter)
    }

    pub fn detector_kind(&self) -> Result<DetectorKind> {
        DetectorKind::parse(&self.detector)
    }

    pub fn schedule_kind(&self) -> Result<Schedule> {
        match self.schedule.as_str() {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            s => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.image_size, self.image_size, self.patch_size)
    }

    pub fn policy(&self, seed: u64) -> PolicyConfig {
        PolicyConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            visual_dim: self.dim,
            max_len: self.max_len,
            seed,
        }
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup {
            return self.lr * step as f64 / self.warmup.max(1) as f64;
        }
        match self.schedule_kind().unwrap_or(Schedule::Constant) {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
                let t = ((step - self.warmup) as f64 / span).min(1.0);
                let floor = self.lr * self.min_lr_frac;
                floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}
