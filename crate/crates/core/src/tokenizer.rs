//! Object- and agent-centric visual tokenization.
//!
//! Object tokens pool the feature rows of each segmentation slot (average or
//! a per-slot learned query). Agent tokens are the raw feature rows of the
//! `G×G` patch window around the gripper keypoint, or `G²` copies of the
//! global feature mean when no keypoint was detected.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::PatchFeatureGrid;
use crate::error::{Error, Result};
use crate::gripper::KeypointPrediction;
use crate::imaging::{patch_window, pixel_to_patch, PatchGeometry};
use crate::nn::gemm::{matmul, matmul_at, matmul_bt};
use crate::nn::layers::{softmax_backward, softmax_inplace};
use crate::nn::{Init, ParamBuilder, ParamRange, Params};
use crate::segment::MaskSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenizerMode {
    Oat,
    FullPatch,
    SingleToken,
    ObjectOnly,
}

impl TokenizerMode {
    pub const ALL: [TokenizerMode; 4] = [Self::Oat, Self::FullPatch, Self::SingleToken, Self::ObjectOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::Oat => "oat",
            Self::FullPatch => "full-patch",
            Self::SingleToken => "single-token",
            Self::ObjectOnly => "object-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tokenizer mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Average,
    Attention,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "attention" => Ok(Self::Attention),
            _ => Err(Error::Config(format!("unknown pool mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenizerConfig {
    pub mode: TokenizerMode,
    /// Object slots `N`.
    pub n_slots: usize,
    /// Agent window side `G` (odd).
    pub grid_side: usize,
    pub pool: PoolMode,
    /// Token width `D`.
    pub dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::Oat,
            n_slots: 7,
            grid_side: 3,
            pool: PoolMode::Average,
            dim: 64,
        }
    }
}

impl TokenizerConfig {
    pub fn with_mode(mode: TokenizerMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 || self.dim == 0 {
            return Err(Error::Parameter("slot count and token width must be positive".into()));
        }
        if self.grid_side.is_multiple_of(2) {
            return Err(Error::Parameter(format!("agent grid side {} must be odd", self.grid_side)));
        }
        Ok(())
    }

    /// Emitted visual tokens for a grid of `k` patches.
    pub fn token_count(&self, k: usize) -> usize {
        match self.mode {
            TokenizerMode::Oat => self.n_slots + self.grid_side * self.grid_side,
            TokenizerMode::FullPatch => k,
            TokenizerMode::SingleToken => 1,
            TokenizerMode::ObjectOnly => self.n_slots,
        }
    }

    /// Queries the attention pool needs, or `None` when no pool is used.
    pub fn pool_queries(&self) -> Option<usize> {
        match (self.mode, self.pool) {
            (TokenizerMode::SingleToken, _) => Some(1),
            (TokenizerMode::Oat | TokenizerMode::ObjectOnly, PoolMode::Attention) => Some(self.n_slots),
            _ => None,
        }
    }
}

pub fn reduction_ratio(config: &TokenizerConfig, geom: &PatchGeometry) -> f64 {
    1.0 - config.token_count(geom.k()) as f64 / geom.k() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Object slot; `empty` marks the zero token of an unused slot.
    Slot { slot: usize, empty: bool },
    /// Agent window cell; `patch` is the copied row, `None` for the
    /// no-detection fallback.
    Agent { cell: usize, patch: Option<usize> },
    Patch(usize),
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens {
    pub dim: usize,
    /// `T × D`, row-major.
    pub tokens: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl VisualTokens {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.tokens.iter().all(|x| x.is_finite())
    }
}

/// Learned query per output token with identity-initialized key and value
/// projections.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub n_queries: usize,
    pub dim: usize,
    pub params: Params,
    q: ParamRange,
    wk: ParamRange,
    wv: ParamRange,
}

impl AttentionPool {
    pub fn new(n_queries: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new();
        let q = pb.add("pool.query", &[n_queries, dim], Init::FanIn(dim), &mut rng);
        let wk = pb.add("pool.key", &[dim, dim], Init::Identity(dim), &mut rng);
        let wv = pb.add("pool.value", &[dim, dim], Init::Identity(dim), &mut rng);
        Self {
            n_queries,
            dim,
            params: pb.finish(),
            q,
            wk,
            wv,
        }
    }

    pub fn for_config(config: &TokenizerConfig, seed: u64) -> Option<Self> {
        config.pool_queries().map(|n| Self::new(n, config.dim, seed))
    }

    fn project(&self, feats: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut keys = vec![0.0; k * d];
        let mut values = vec![0.0; k * d];
        matmul_bt(k, d, d, feats, self.params.get(self.wk), &mut keys, false);
        matmul_bt(k, d, d, feats, self.params.get(self.wv), &mut values, false);
        (keys, values)
    }

    /// Attention weights of query `j` over `members`, and the pooled token.
    fn attend(&self, keys: &[f64], values: &[f64], members: &[usize], j: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let q = &self.params.get(self.q)[j * d..(j + 1) * d];
        let scale = 1.0 / (d as f64).sqrt();
        let mut w: Vec<f64> = members
            .iter()
            .map(|&i| q.iter().zip(&keys[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        softmax_inplace(&mut w);
        let mut t = vec![0.0; d];
        for (&i, &a) in members.iter().zip(&w) {
            for (o, v) in t.iter_mut().zip(&values[i * d..(i + 1) * d]) {
                *o += a * v;
            }
        }
        (w, t)
    }
}

/// Which feature rows each token reads, and how.
#[derive(Clone, Debug)]
enum Source {
    Zero,
    Mean(Vec<usize>),
    Copy(usize),
    Attend { query: usize, members: Vec<usize>, weights: Vec<f64> },
}

/// Forward record for the backward pass.
#[derive(Clone, Debug)]
pub struct TokenCache {
    sources: Vec<Source>,
    projected: Option<(Vec<f64>, Vec<f64>)>,
}

fn check_k(feats: &PatchFeatureGrid, masks: &MaskSet) -> Result<()> {
    if masks.k() != feats.k() {
        return Err(Error::Shape(format!("masks cover {} patches, features {}", masks.k(), feats.k())));
    }
    Ok(())
}

fn pooled_sources(masks: &MaskSet, pool: Option<&AttentionPool>) -> Vec<Source> {
    (0..masks.n_slots())
        .map(|j| {
            let members = masks.members(j);
            match (members.is_empty(), pool) {
                (true, _) => Source::Zero,
                (false, None) => Source::Mean(members),
                (false, Some(_)) => Source::Attend {
                    query: j,
                    members,
                    weights: Vec::new(),
                },
            }
        })
        .collect()
}

fn slot_provenance(masks: &MaskSet) -> Vec<Provenance> {
    (0..masks.n_slots())
        .map(|slot| Provenance::Slot {
            slot,
            empty: masks.counts()[slot] == 0,
        })
        .collect()
}

/// Patch indices of the agent window, or `None` without a detection.
pub fn agent_window(geom: &PatchGeometry, kp: &KeypointPrediction, side: usize) -> Result<Option<Vec<usize>>> {
    let Some(p) = kp.point else {
        return Ok(None);
    };
    let center = pixel_to_patch(geom, p)?;
    Ok(Some(patch_window(geom, center, side)?.into_iter().map(|i| geom.flat(i)).collect()))
}

fn agent_sources(feats: &PatchFeatureGrid, kp: &KeypointPrediction, side: usize) -> Result<(Vec<Source>, Vec<Provenance>)> {
    if side.is_multiple_of(2) {
        return Err(Error::Parameter(format!("agent grid side {side} must be odd")));
    }
    Ok(match agent_window(&feats.geom, kp, side)? {
        Some(window) => window
            .into_iter()
            .enumerate()
            .map(|(cell, k)| (Source::Copy(k), Provenance::Agent { cell, patch: Some(k) }))
            .unzip(),
        None => (0..side * side)
            .map(|cell| (Source::Mean((0..feats.k()).collect()), Provenance::Agent { cell, patch: None }))
            .unzip(),
    })
}

fn realize(feats: &PatchFeatureGrid, sources: &mut [Source], pool: Option<&AttentionPool>) -> (Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) {
    let d = feats.dim;
    let needs_pool = sources.iter().any(|s| matches!(s, Source::Attend { .. }));
    let projected = match (needs_pool, pool) {
        (true, Some(p)) => Some(p.project(&feats.features, feats.k())),
        _ => None,
    };
    let mut out = vec![0.0; sources.len() * d];
    for (t, src) in sources.iter_mut().enumerate() {
        let dst = &mut out[t * d..(t + 1) * d];
        match src {
            Source::Zero => {}
            Source::Copy(k) => dst.copy_from_slice(feats.row(*k)),
            Source::Mean(members) => {
                for &i in members.iter() {
                    for (o, v) in dst.iter_mut().zip(feats.row(i)) {
                        *o += v;
                    }
                }
                let n = members.len() as f64;
                dst.iter_mut().for_each(|o| *o /= n);
            }
            Source::Attend { query, members, weights } => {
                let (keys, values) = projected.as_ref().unwrap();
                let (w, tok) = pool.unwrap().attend(keys, values, members, *query);
                dst.copy_from_slice(&tok);
                *weights = w;
            }
        }
    }
    (out, projected)
}

fn check_pool(pool: Option<&AttentionPool>, dim: usize, queries: usize) -> Result<&AttentionPool> {
    let p = pool.ok_or_else(|| Error::Parameter("attention pooling needs pool parameters".into()))?;
    if p.dim != dim || p.n_queries < queries {
        return Err(Error::Shape(format!(
            "pool has {} queries of width {}, need {queries} of width {dim}",
            p.n_queries, p.dim
        )));
    }
    Ok(p)
}

/// One token per slot; empty slots give a zero token.
pub fn object_tokens(feats: &PatchFeatureGrid, masks: &MaskSet, pool: Option<&AttentionPool>) -> Result<VisualTokens> {
    check_k(feats, masks)?;
    if let Some(p) = pool {
        check_pool(Some(p), feats.dim, masks.n_slots())?;
    }
    let mut sources = pooled_sources(masks, pool);
    let (tokens, _) = realize(feats, &mut sources, pool);
    Ok(VisualTokens {
        dim: feats.dim,
        tokens,
        provenance: slot_provenance(masks),
    })
}

pub fn agent_tokens(feats: &PatchFeatureGrid, kp: &KeypointPrediction, side: usize) -> Result<VisualTokens> {
    let (mut sources, provenance) = agent_sources(feats, kp, side)?;
    let (tokens, _) = realize(feats, &mut sources, None);
    Ok(VisualTokens {
        dim: feats.dim,
        tokens,
        provenance,
    })
}

pub fn tokenize(
    feats: &PatchFeatureGrid,
    masks: &MaskSet,
    kp: &KeypointPrediction,
    config: &TokenizerConfig,
    pool: Option<&AttentionPool>,
) -> Result<VisualTokens> {
    Ok(tokenize_cached(feats, masks, kp, config, pool)?.0)
}

pub fn tokenize_cached(
    feats: &PatchFeatureGrid,
    masks: &MaskSet,
    kp: &KeypointPrediction,
    config: &TokenizerConfig,
    pool: Option<&AttentionPool>,
) -> Result<(VisualTokens, TokenCache)> {
    config.validate()?;
    check_k(feats, masks)?;
    if feats.dim != config.dim {
        return Err(Error::Shape(format!("features have width {}, config {}", feats.dim, config.dim)));
    }
    let uses_slots = matches!(config.mode, TokenizerMode::Oat | TokenizerMode::ObjectOnly);
    if uses_slots && masks.n_slots() != config.n_slots {
        return Err(Error::Shape(format!("{} mask slots, config expects {}", masks.n_slots(), config.n_slots)));
    }
    let pool = match config.pool_queries() {
        Some(n) => Some(check_pool(pool, config.dim, n)?),
        None => None,
    };
    let (mut sources, provenance) = match config.mode {
        TokenizerMode::Oat => {
            let (a_src, a_prov) = agent_sources(feats, kp, config.grid_side)?;
            let mut src = pooled_sources(masks, pool);
            let mut prov = slot_provenance(masks);
            src.extend(a_src);
            prov.extend(a_prov);
            (src, prov)
        }
        TokenizerMode::ObjectOnly => (pooled_sources(masks, pool), slot_provenance(masks)),
        TokenizerMode::FullPatch => (0..feats.k()).map(|k| (Source::Copy(k), Provenance::Patch(k))).unzip(),
        TokenizerMode::SingleToken => (
            vec![Source::Attend {
                query: 0,
                members: (0..feats.k()).collect(),
                weights: Vec::new(),
            }],
            vec![Provenance::Global],
        ),
    };
    let (tokens, projected) = realize(feats, &mut sources, pool);
    Ok((
        VisualTokens {
            dim: feats.dim,
            tokens,
            provenance,
        },
        TokenCache { sources, projected },
    ))
}

/// Gradient w.r.t. the feature rows; accumulates pool gradients into
/// `pool_grads` when attention pooling was used.
pub fn tokenize_backward(
    feats: &PatchFeatureGrid,
    cache: &TokenCache,
    pool: Option<&AttentionPool>,
    dtokens: &[f64],
    mut pool_grads: Option<&mut [f64]>,
) -> Vec<f64> {
    let d = feats.dim;
    let k = feats.k();
    let mut dfeats = vec![0.0; k * d];
    // Gradients w.r.t. projected keys and values, applied once at the end.
    let mut dkeys = vec![0.0; k * d];
    let mut dvalues = vec![0.0; k * d];
    let mut any_attend = false;
    for (t, src) in cache.sources.iter().enumerate() {
        let dt = &dtokens[t * d..(t + 1) * d];
        match src {
            Source::Zero => {}
            Source::Copy(i) => {
                for (o, g) in dfeats[i * d..(i + 1) * d].iter_mut().zip(dt) {
                    *o += g;
                }
            }
            Source::Mean(members) => {
                let n = members.len() as f64;
                for &i in members {
                    for (o, g) in dfeats[i * d..(i + 1) * d].iter_mut().zip(dt) {
                        *o += g / n;
                    }
                }
            }
            Source::Attend { query, members, weights } => {
                any_attend = true;
                let pool = pool.expect("attention cache without pool");
                let (keys, values) = cache.projected.as_ref().unwrap();
                let q = &pool.params.get(pool.q)[query * d..(query + 1) * d];
                let scale = 1.0 / (d as f64).sqrt();
                let dw: Vec<f64> = members
                    .iter()
                    .map(|&i| dt.iter().zip(&values[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum())
                    .collect();
                let mut ds = vec![0.0; members.len()];
                softmax_backward(weights, &dw, &mut ds);
                let mut dq = vec![0.0; d];
                for ((&i, &a), &s) in members.iter().zip(weights).zip(&ds) {
                    for c in 0..d {
                        dvalues[i * d + c] += a * dt[c];
                        dkeys[i * d + c] += s * scale * q[c];
                        dq[c] += s * scale * keys[i * d + c];
                    }
                }
                if let Some(g) = pool_grads.as_deref_mut() {
                    for (o, v) in g[pool.q.offset + query * d..pool.q.offset + (query + 1) * d].iter_mut().zip(&dq) {
                        *o += v;
                    }
                }
            }
        }
    }
    if any_attend {
        let pool = pool.unwrap();
        let p = &pool.params;
        matmul(k, d, d, &dkeys, p.get(pool.wk), &mut dfeats, true);
        matmul(k, d, d, &dvalues, p.get(pool.wv), &mut dfeats, true);
        if let Some(g) = pool_grads {
            matmul_at(k, d, d, &dkeys, &feats.features, &mut g[pool.wk.range()], true);
            matmul_at(k, d, d, &dvalues, &feats.features, &mut g[pool.wv.range()], true);
        }
    }
    dfeats
}

/// Finite-difference check of the attention pool under a random linear loss.
pub fn attention_pool_grad_check(seed: u64, coords: usize) -> Result<crate::nn::GradCheck> {
    use rand::Rng;
    let geom = PatchGeometry::new(56, 56, 14)?;
    let cfg = TokenizerConfig {
        pool: PoolMode::Attention,
        dim: 8,
        n_slots: 3,
        ..TokenizerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = PatchFeatureGrid::new(geom, cfg.dim, (0..geom.k() * cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let masks = MaskSet::new(3, (0..geom.k()).map(|i| (i * 7 + 1) % 3).collect())?;
    let mut pool = AttentionPool::new(3, cfg.dim, seed);
    for v in pool.params.values.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let kp = KeypointPrediction {
        point: Some(crate::imaging::PixelPoint::new(20.0, 30.0)),
        confidence: 1.0,
    };
    let t = cfg.token_count(geom.k());
    let weights: Vec<f64> = (0..t * cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, cache) = tokenize_cached(&feats, &masks, &kp, &cfg, Some(&pool))?;
    let mut grads = pool.params.zeros_like();
    tokenize_backward(&feats, &cache, Some(&pool), &weights, Some(&mut grads));
    let picks = crate::nn::spot_coords(&pool.params, coords, &mut rng);
    let mut probe = pool.clone();
    let mut params = std::mem::take(&mut probe.params);
    Ok(crate::nn::finite_difference_check(&mut params, &grads, &picks, 1e-4, |p| {
        probe.params = p.clone();
        let v = tokenize(&feats, &masks, &kp, &cfg, Some(&probe)).unwrap();
        v.tokens.iter().zip(&weights).map(|(a, b)| a * b).sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::PixelPoint;
    use proptest::prelude::*;
    use rand::Rng;

    fn geom(g: usize) -> PatchGeometry {
        PatchGeometry::new(g * 14, g * 14, 14).unwrap()
    }

    fn random_feats(g: &PatchGeometry, d: usize, rng: &mut ChaCha8Rng) -> PatchFeatureGrid {
        PatchFeatureGrid::new(*g, d, (0..g.k() * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn detected(u: f64, v: f64) -> KeypointPrediction {
        KeypointPrediction {
            point: Some(PixelPoint::new(u, v)),
            confidence: 1.0,
        }
    }

    #[test]
    fn token_counts_and_ratio() {
        let g16 = geom(16);
        let oat = TokenizerConfig::default();
        assert_eq!(oat.token_count(g16.k()), 16);
        assert_eq!(reduction_ratio(&oat, &g16), 0.9375);
        assert_eq!(reduction_ratio(&TokenizerConfig::with_mode(TokenizerMode::FullPatch), &g16), 0.0);
        let wide = TokenizerConfig {
            grid_side: 5,
            ..oat
        };
        assert_eq!(reduction_ratio(&wide, &g16), 0.875);
        assert_eq!(TokenizerConfig::with_mode(TokenizerMode::FullPatch).token_count(256), 256);
        assert_eq!(TokenizerConfig::with_mode(TokenizerMode::SingleToken).token_count(256), 1);
    }

    #[test]
    fn two_patch_average() {
        let g = PatchGeometry::new(14, 28, 14).unwrap();
        let feats = PatchFeatureGrid::new(g, 2, vec![2.0, 1.0, 4.0, 5.0]).unwrap();
        let masks = MaskSet::new(2, vec![0, 0]).unwrap();
        let t = object_tokens(&feats, &masks, None).unwrap();
        assert_eq!(t.token(0), &[3.0, 3.0]);
        assert_eq!(t.token(1), &[0.0, 0.0]);
        assert_eq!(t.provenance[1], Provenance::Slot { slot: 1, empty: true });
    }

    #[test]
    fn equal_keys_attention_is_average() {
        let g = geom(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut feats = random_feats(&g, 6, &mut rng);
        // Equal keys: zero key projection.
        let mut pool = AttentionPool::new(3, 6, 1);
        let wk = pool.wk;
        pool.params.values[wk.range()].iter_mut().for_each(|v| *v = 0.0);
        let masks = MaskSet::new(3, (0..16).map(|i| i % 3).collect()).unwrap();
        let avg = object_tokens(&feats, &masks, None).unwrap();
        let att = object_tokens(&feats, &masks, Some(&pool)).unwrap();
        for (a, b) in avg.tokens.iter().zip(&att.tokens) {
            assert!((a - b).abs() < 1e-12);
        }
        // Identical rows give equal keys under the default projection too.
        feats.features = (0..16 * 6).map(|i| (i % 6) as f64).collect();
        let pool = AttentionPool::new(3, 6, 2);
        let att = object_tokens(&feats, &masks, Some(&pool)).unwrap();
        let avg = object_tokens(&feats, &masks, None).unwrap();
        for (a, b) in avg.tokens.iter().zip(&att.tokens) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn center_window_on_16_grid() {
        let g = geom(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = random_feats(&g, 4, &mut rng);
        let t = agent_tokens(&feats, &detected(112.0, 112.0), 3).unwrap();
        let expect: Vec<usize> = (7..=9).flat_map(|r| (7..=9).map(move |c| r * 16 + c)).collect();
        for (i, &k) in expect.iter().enumerate() {
            assert_eq!(t.token(i), feats.row(k));
        }
        let corner = agent_tokens(&feats, &detected(0.0, 0.0), 3).unwrap();
        let expect: Vec<usize> = (0..3).flat_map(|r| (0..3).map(move |c| r * 16 + c)).collect();
        for (i, &k) in expect.iter().enumerate() {
            assert_eq!(corner.token(i), feats.row(k));
        }
    }

    #[test]
    fn fallback_is_global_mean() {
        let g = geom(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = random_feats(&g, 5, &mut rng);
        let t = agent_tokens(&feats, &KeypointPrediction::none(), 3).unwrap();
        assert_eq!(t.len(), 9);
        for c in 0..5 {
            let mean = (0..64).map(|k| feats.row(k)[c]).sum::<f64>() / 64.0;
            for i in 0..9 {
                assert!((t.token(i)[c] - mean).abs() < 1e-12);
                assert_eq!(t.token(i), t.token(0));
            }
        }
    }

    #[test]
    fn mode_inconsistency_errors() {
        let g = geom(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = random_feats(&g, 64, &mut rng);
        let masks = MaskSet::new(5, vec![0; 64]).unwrap();
        let kp = KeypointPrediction::none();
        let cfg = TokenizerConfig::default();
        assert!(tokenize(&feats, &masks, &kp, &cfg, None).is_err());
        let bad_k = MaskSet::new(7, vec![0; 16]).unwrap();
        assert!(matches!(object_tokens(&feats, &bad_k, None), Err(Error::Shape(_))));
        let att = TokenizerConfig {
            pool: PoolMode::Attention,
            ..cfg
        };
        let masks7 = MaskSet::new(7, vec![0; 64]).unwrap();
        assert!(tokenize(&feats, &masks7, &kp, &att, None).is_err());
        let even = TokenizerConfig { grid_side: 2, ..cfg };
        assert!(tokenize(&feats, &masks7, &kp, &even, None).is_err());
    }

    #[test]
    fn oat_layout() {
        let g = geom(8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = random_feats(&g, 64, &mut rng);
        let masks = MaskSet::new(7, (0..64).map(|i| i % 4).collect()).unwrap();
        let v = tokenize(&feats, &masks, &detected(50.0, 60.0), &TokenizerConfig::default(), None).unwrap();
        assert_eq!(v.len(), 16);
        assert!(v.provenance[..7].iter().all(|p| matches!(p, Provenance::Slot { .. })));
        assert!(v.provenance[7..].iter().all(|p| matches!(p, Provenance::Agent { patch: Some(_), .. })));
        assert!(v.all_finite());
    }

    #[test]
    fn pool_gradients() {
        let check = attention_pool_grad_check(0, 20).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn feature_gradients_all_modes() {
        use crate::nn::relative_error;
        let g = geom(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 6;
        let feats = random_feats(&g, d, &mut rng);
        let masks = MaskSet::new(3, (0..16).map(|i| (i * 5) % 3).collect()).unwrap();
        for mode in TokenizerMode::ALL {
            for pool_mode in [PoolMode::Average, PoolMode::Attention] {
                for kp in [detected(20.0, 40.0), KeypointPrediction::none()] {
                    let cfg = TokenizerConfig {
                        mode,
                        n_slots: 3,
                        grid_side: 3,
                        pool: pool_mode,
                        dim: d,
                    };
                    let pool = AttentionPool::for_config(&cfg, 1);
                    let (v, cache) = tokenize_cached(&feats, &masks, &kp, &cfg, pool.as_ref()).unwrap();
                    let w: Vec<f64> = (0..v.tokens.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let df = tokenize_backward(&feats, &cache, pool.as_ref(), &w, None);
                    let loss = |f: &PatchFeatureGrid| -> f64 {
                        let v = tokenize(f, &masks, &kp, &cfg, pool.as_ref()).unwrap();
                        v.tokens.iter().zip(&w).map(|(a, b)| a * b).sum()
                    };
                    for i in [0, 7, 40, 95] {
                        let mut up = feats.clone();
                        up.features[i] += 1e-6;
                        let mut down = feats.clone();
                        down.features[i] -= 1e-6;
                        let n = (loss(&up) - loss(&down)) / 2e-6;
                        assert!(relative_error(df[i], n) < 1e-5, "{mode:?} {pool_mode:?} {i}: {} vs {n}", df[i]);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn token_count_law(mode_i in 0usize..4, n in 1usize..10, half in 0usize..3, g in 3usize..9, attention in any::<bool>(), present in any::<bool>()) {
            let side = 2 * half + 1;
            prop_assume!(side <= g);
            let geom = geom(g);
            let cfg = TokenizerConfig {
                mode: TokenizerMode::ALL[mode_i],
                n_slots: n,
                grid_side: side,
                pool: if attention { PoolMode::Attention } else { PoolMode::Average },
                dim: 4,
            };
            let mut rng = ChaCha8Rng::seed_from_u64((g * 31 + n) as u64);
            let feats = random_feats(&geom, 4, &mut rng);
            let masks = MaskSet::new(n, (0..geom.k()).map(|i| i % n).collect()).unwrap();
            let kp = if present { detected(5.0, 9.0) } else { KeypointPrediction::none() };
            let pool = AttentionPool::for_config(&cfg, 0);
            let v = tokenize(&feats, &masks, &kp, &cfg, pool.as_ref()).unwrap();
            prop_assert_eq!(v.len(), cfg.token_count(geom.k()));
            prop_assert_eq!(v.tokens.len(), v.len() * 4);
        }

        #[test]
        fn partition_identity(seed in any::<u64>(), n in 1usize..12) {
            let g = geom(6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = random_feats(&g, 5, &mut rng);
            let masks = MaskSet::new(n, (0..g.k()).map(|_| rng.gen_range(0..n)).collect()).unwrap();
            let t = object_tokens(&feats, &masks, None).unwrap();
            for c in 0..5 {
                let weighted: f64 = (0..n).map(|j| masks.counts()[j] as f64 * t.token(j)[c]).sum::<f64>() / g.k() as f64;
                let mean: f64 = (0..g.k()).map(|k| feats.row(k)[c]).sum::<f64>() / g.k() as f64;
                prop_assert!((weighted - mean).abs() < 1e-9);
            }
        }

        #[test]
        fn permuted_labels_same_tokens(seed in any::<u64>()) {
            use crate::segment::normalize_slots;
            let g = geom(6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = random_feats(&g, 4, &mut rng);
            let raw: Vec<usize> = (0..g.k()).map(|_| rng.gen_range(0..10)).collect();
            let permuted: Vec<usize> = raw.iter().map(|&l| (l * 7 + 3) % 10 + 100).collect();
            let a = normalize_slots(&raw, &g, None, 7).unwrap();
            let b = normalize_slots(&permuted, &g, None, 7).unwrap();
            let ta = object_tokens(&feats, &a, None).unwrap();
            let tb = object_tokens(&feats, &b, None).unwrap();
            prop_assert_eq!(ta.tokens, tb.tokens);
        }
    }

    #[test]
    fn locality_under_linear_encoder() {
        use crate::encoder::{EncoderConfig, EncoderMode, FeatureEncoder};
        use crate::imaging::Image;
        let g = geom(8);
        let enc = FeatureEncoder::new(EncoderConfig::new(EncoderMode::LinearFrozen, g)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Image::new(112, 112, (0..112 * 112 * 3).map(|_| rng.gen()).collect()).unwrap();
        let masks = MaskSet::new(7, (0..64).map(|i| (i / 8) % 7).collect()).unwrap();
        let kp = detected(20.0, 20.0); // window rows/cols 0..=2
        let cfg = TokenizerConfig::default();
        let base = tokenize(&enc.encode(&img).unwrap(), &masks, &kp, &cfg, None).unwrap();
        // Patch (6, 6) lies in slot 6 and outside the agent window.
        let mut changed = img.clone();
        for v in 84..98 {
            for u in 84..98 {
                changed.set_pixel(u, v, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
        let after = tokenize(&enc.encode(&changed).unwrap(), &masks, &kp, &cfg, None).unwrap();
        for t in 0..16 {
            if t == 6 {
                assert_ne!(base.token(t), after.token(t));
            } else {
                assert_eq!(base.token(t), after.token(t));
            }
        }
    }
}
