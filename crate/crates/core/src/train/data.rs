//! Training frames with perception precomputed once per frame.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gripper::KeypointPrediction;
use crate::imaging::Image;
use crate::policy::{ActionBinning, ACTION_DIM};
use crate::scene::{Dataset, Relation};
use crate::segment::MaskSet;

use super::model::Model;

#[derive(Clone, Debug)]
pub struct Frame {
    pub episode: usize,
    pub rgb: Vec<u8>,
    pub prefix: Vec<usize>,
    pub masks: MaskSet,
    pub keypoint: KeypointPrediction,
    pub bins: [usize; ACTION_DIM],
    pub relation: Relation,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub image_size: usize,
    pub frames: Vec<Frame>,
}

impl PreparedData {
    pub fn image(&self, i: usize) -> Image {
        let s = self.image_size;
        Image::from_rgb8(s, s, &self.frames[i].rgb).expect("frame has the dataset size")
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Binning fitted on every action of the dataset.
pub fn fit_binning(dataset: &Dataset, bins: usize) -> Result<ActionBinning> {
    let actions: Vec<_> = dataset.frames().map(|(_, s)| s.action).collect();
    ActionBinning::fit(&actions, bins)
}

/// Runs the model's segmenter and detector over every frame and encodes
/// instructions and actions as ids.
pub fn prepare(dataset: &Dataset, model: &Model) -> Result<PreparedData> {
    let size = dataset.manifest.image_size;
    let geom = model.geometry();
    if geom.height() != size || geom.width() != size {
        return Err(Error::Data(format!("dataset images are {size} px, model expects {}", geom.height())));
    }
    let mut frames = Vec::with_capacity(dataset.frame_count());
    for (e, ep) in dataset.episodes.iter().enumerate() {
        let prefix = model.policy.vocab.encode_instruction(&ep.instruction)?;
        for step in &ep.steps {
            let img = step.image(size);
            let (masks, keypoint) = model.perceive(&img, &step.masks, step.keypoint)?;
            frames.push(Frame {
                episode: e,
                rgb: step.rgb.clone(),
                prefix: prefix.clone(),
                masks,
                keypoint,
                bins: model.binning.encode(&step.action)?,
                relation: ep.instruction.relation,
            });
        }
    }
    if frames.is_empty() {
        return Err(Error::Data("dataset has no frames".into()));
    }
    Ok(PreparedData { image_size: size, frames })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Frame order: one seeded permutation per epoch, a pure function of
/// `(seed, n, epoch)` so resumed runs see the same stream.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    seed: u64,
    n: usize,
    epoch: usize,
    perm: Vec<usize>,
}

impl BatchOrder {
    pub fn new(seed: u64, n: usize) -> Self {
        let mut o = Self {
            seed,
            n,
            epoch: usize::MAX,
            perm: Vec::new(),
        };
        o.load_epoch(0);
        o
    }

    fn load_epoch(&mut self, epoch: usize) {
        if self.epoch != epoch {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ splitmix(epoch as u64)));
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng);
            self.epoch = epoch;
        }
    }

    /// Frame at global example position `g`.
    pub fn at(&mut self, g: usize) -> usize {
        self.load_epoch(g / self.n);
        self.perm[g % self.n]
    }

    /// Frames of 0-based batch `b`.
    pub fn batch(&mut self, b: usize, size: usize) -> Vec<usize> {
        (b * size..(b + 1) * size).map(|g| self.at(g)).collect()
    }
}

/// Hex digest of the first `examples` positions of the order.
pub fn order_hash(seed: u64, n: usize, examples: usize) -> String {
    let mut o = BatchOrder::new(seed, n);
    let mut h = Sha256::new();
    for g in 0..examples {
        h.update((o.at(g) as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Evenly spaced frames used for teacher-forced accuracy probes.
pub fn probe_indices(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    (0..count).map(|i| i * n / count.max(1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_a_permutation_per_epoch() {
        let mut o = BatchOrder::new(3, 10);
        let mut first: Vec<usize> = (0..10).map(|g| o.at(g)).collect();
        let second: Vec<usize> = (10..20).map(|g| o.at(g)).collect();
        assert_ne!(first, second);
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        // Random access matches sequential access.
        let mut fresh = BatchOrder::new(3, 10);
        assert_eq!(fresh.at(13), second[3]);
        assert_eq!(fresh.at(2), o.at(2));
        assert_eq!(order_hash(3, 10, 25), order_hash(3, 10, 25));
        assert_ne!(order_hash(3, 10, 25), order_hash(4, 10, 25));
    }

    #[test]
    fn batches_follow_order() {
        let mut o = BatchOrder::new(1, 7);
        let b = o.batch(2, 3);
        let mut p = BatchOrder::new(1, 7);
        assert_eq!(b, vec![p.at(6), p.at(7), p.at(8)]);
        assert_eq!(probe_indices(10, 4), vec![0, 2, 5, 7]);
        assert_eq!(probe_indices(3, 8).len(), 3);
    }
}
