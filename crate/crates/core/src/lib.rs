//! Object-agent-centric visual tokenization for small action-token policies.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gripper;
pub mod imaging;
pub mod nn;
pub mod policy;
pub mod scene;
pub mod segment;
pub mod tokenizer;
pub mod train;

pub use encoder::{EncoderConfig, EncoderMode, FeatureEncoder, PatchFeatureGrid};
pub use error::{Error, Result};
pub use gripper::{DetectorParams, KeypointPrediction};
pub use imaging::{Image, PatchGeometry, PatchIndex, PixelPoint};
pub use segment::MaskSet;
pub use tokenizer::{PoolMode, TokenizerConfig, TokenizerMode, VisualTokens};
