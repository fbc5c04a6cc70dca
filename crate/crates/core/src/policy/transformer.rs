//! Pre-LN decoder-only transformer over `[BOS, words…, SEP, visual…, a1…a7]`.
//!
//! Linear layers run on all sequences of a batch packed row-wise; attention
//! runs per sequence. The head predicts action bin `i` from the position
//! just before action token `i`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::binning::ACTION_DIM;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::gemm::{gemm_view, View};
use crate::nn::layers::{gelu_backward_inplace, gelu_vec, softmax_inplace, LayerNormCache};
use crate::nn::{Init, LayerNorm, Linear, ParamBuilder, ParamRange, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PolicyConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Visual token width `D`.
    pub visual_dim: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            visual_dim: 64,
            max_len: 96,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.max_len == 0 {
            return Err(Error::Parameter("policy sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub vocab: Vocabulary,
    pub params: Params,
    tok_emb: ParamRange,
    pos_emb: ParamRange,
    proj1: Linear,
    proj2: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

/// One sequence: language ids, `T × D` visual tokens, and the 7 action bins
/// fed back as inputs (teacher forcing).
#[derive(Clone, Debug)]
pub struct PolicyInput<'a> {
    pub prefix: &'a [usize],
    pub visual: &'a [f64],
    pub actions: [usize; ACTION_DIM],
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    offset: usize,
    prefix: usize,
    visual: usize,
    len: usize,
}

impl Layout {
    /// Row predicting action `i`.
    fn predict_row(&self, i: usize) -> usize {
        self.offset + self.prefix + self.visual - 1 + i
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    /// Row-softmax weights per (sequence, head), `len × len`.
    probs: Vec<Vec<f64>>,
    att: Vec<f64>,
    ln2: LayerNormCache,
    h2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

pub struct ForwardCache {
    layouts: Vec<Layout>,
    rows: usize,
    token_ids: Vec<Option<usize>>,
    vis_in: Vec<f64>,
    vis_pre: Vec<f64>,
    vis_hidden: Vec<f64>,
    blocks: Vec<BlockCache>,
    head_in: Vec<f64>,
    ln_f: LayerNormCache,
    /// `n × 7 × bins` logits.
    pub logits: Vec<f64>,
}

/// Cross-entropy outcome of a teacher-forced batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    /// Per example `T × D` gradient w.r.t. the visual tokens.
    pub dvisual: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(config: PolicyConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder::new();
        let w = config.width;
        let tok_emb = pb.add("tok_emb", &[vocab.len(), w], Init::Uniform(0.1), &mut rng);
        let pos_emb = pb.add("pos_emb", &[config.max_len, w], Init::Uniform(0.1), &mut rng);
        let proj1 = Linear::new(&mut pb, "proj.0", config.visual_dim, w, &mut rng);
        let proj2 = Linear::new(&mut pb, "proj.1", w, w, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| Block {
                ln1: LayerNorm::new(&mut pb, &format!("block{l}.ln1"), w, &mut rng),
                qkv: Linear::new(&mut pb, &format!("block{l}.qkv"), w, 3 * w, &mut rng),
                out: Linear::new(&mut pb, &format!("block{l}.out"), w, w, &mut rng),
                ln2: LayerNorm::new(&mut pb, &format!("block{l}.ln2"), w, &mut rng),
                fc1: Linear::new(&mut pb, &format!("block{l}.fc1"), w, config.mlp_ratio * w, &mut rng),
                fc2: Linear::new(&mut pb, &format!("block{l}.fc2"), config.mlp_ratio * w, w, &mut rng),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut pb, "ln_f", w, &mut rng);
        let head = Linear::new(&mut pb, "head", w, vocab.bins(), &mut rng);
        Ok(Self {
            config,
            vocab,
            params: pb.finish(),
            tok_emb,
            pos_emb,
            proj1,
            proj2,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn bins(&self) -> usize {
        self.vocab.bins()
    }

    /// Sequence length for `j` language positions and `t` visual tokens.
    pub fn sequence_len(prefix: usize, visual: usize) -> usize {
        prefix + visual + ACTION_DIM
    }

    fn layouts(&self, inputs: &[PolicyInput]) -> Result<Vec<Layout>> {
        let d = self.config.visual_dim;
        let mut offset = 0;
        inputs
            .iter()
            .map(|x| {
                if x.visual.len() % d != 0 || x.visual.is_empty() {
                    return Err(Error::Shape(format!("{} visual values for width {d}", x.visual.len())));
                }
                if x.prefix.is_empty() {
                    return Err(Error::Shape("empty language prefix".into()));
                }
                if let Some(&bad) = x.prefix.iter().find(|&&id| id >= self.vocab.len()) {
                    return Err(Error::Shape(format!("token id {bad} outside the vocabulary")));
                }
                if let Some(&bad) = x.actions.iter().find(|&&b| b >= self.bins()) {
                    return Err(Error::Shape(format!("action bin {bad} outside 0..{}", self.bins())));
                }
                let visual = x.visual.len() / d;
                let len = Self::sequence_len(x.prefix.len(), visual);
                if len > self.config.max_len {
                    return Err(Error::SequenceOverflow {
                        len,
                        max: self.config.max_len,
                    });
                }
                let l = Layout {
                    offset,
                    prefix: x.prefix.len(),
                    visual,
                    len,
                };
                offset += len;
                Ok(l)
            })
            .collect()
    }

    pub fn forward(&self, inputs: &[PolicyInput]) -> Result<ForwardCache> {
        let p = &self.params;
        let w = self.config.width;
        let dv = self.config.visual_dim;
        let layouts = self.layouts(inputs)?;
        let rows: usize = layouts.iter().map(|l| l.len).sum();

        let vis_in: Vec<f64> = inputs.iter().flat_map(|x| x.visual.iter().copied()).collect();
        let vis_rows = vis_in.len() / dv;
        let vis_pre = self.proj1.forward(p, &vis_in, vis_rows);
        let vis_hidden = gelu_vec(&vis_pre);
        let vis = self.proj2.forward(p, &vis_hidden, vis_rows);

        let tok = p.get(self.tok_emb);
        let pos = p.get(self.pos_emb);
        let mut x = vec![0.0; rows * w];
        let mut token_ids = Vec::with_capacity(rows);
        let mut vrow = 0;
        for (inp, l) in inputs.iter().zip(&layouts) {
            for t in 0..l.len {
                let dst = &mut x[(l.offset + t) * w..(l.offset + t + 1) * w];
                let id = if t < l.prefix {
                    Some(inp.prefix[t])
                } else if t < l.prefix + l.visual {
                    None
                } else {
                    Some(self.vocab.bin_id(inp.actions[t - l.prefix - l.visual]))
                };
                token_ids.push(id);
                let src = match id {
                    Some(id) => &tok[id * w..(id + 1) * w],
                    None => {
                        vrow += 1;
                        &vis[(vrow - 1) * w..vrow * w]
                    }
                };
                for ((o, a), b) in dst.iter_mut().zip(src).zip(&pos[t * w..(t + 1) * w]) {
                    *o = a + b;
                }
            }
        }

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (h1, ln1) = b.ln1.forward(p, &x, rows);
            let qkv = b.qkv.forward(p, &h1, rows);
            let mut att = vec![0.0; rows * w];
            let probs = self.attention_forward(&layouts, &qkv, &mut att);
            let o = b.out.forward(p, &att, rows);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let (h2, ln2) = b.ln2.forward(p, &x, rows);
            let pre = b.fc1.forward(p, &h2, rows);
            let act = gelu_vec(&pre);
            let m = b.fc2.forward(p, &act, rows);
            x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
            blocks.push(BlockCache {
                ln1,
                h1,
                qkv,
                probs,
                att,
                ln2,
                h2,
                pre,
                act,
            });
        }

        let n_pred = layouts.len() * ACTION_DIM;
        let mut gathered = Vec::with_capacity(n_pred * w);
        for l in &layouts {
            for i in 0..ACTION_DIM {
                let r = l.predict_row(i);
                gathered.extend_from_slice(&x[r * w..(r + 1) * w]);
            }
        }
        let (head_in, ln_f) = self.ln_f.forward(p, &gathered, n_pred);
        let logits = self.head.forward(p, &head_in, n_pred);
        Ok(ForwardCache {
            layouts,
            rows,
            token_ids,
            vis_in,
            vis_pre,
            vis_hidden,
            blocks,
            head_in,
            ln_f,
            logits,
        })
    }

    fn head_dim(&self) -> usize {
        self.config.width / self.config.heads
    }

    fn attention_forward(&self, layouts: &[Layout], qkv: &[f64], att: &mut [f64]) -> Vec<Vec<f64>> {
        let w = self.config.width;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = Vec::with_capacity(layouts.len() * self.config.heads);
        for l in layouts {
            let s = l.len;
            for h in 0..self.config.heads {
                let q = View::rows(l.offset * 3 * w + h * dh, 3 * w);
                let k = View::rows(l.offset * 3 * w + w + h * dh, 3 * w);
                let v = View::rows(l.offset * 3 * w + 2 * w + h * dh, 3 * w);
                let mut sc = vec![0.0; s * s];
                gemm_view(s, dh, s, scale, qkv, q, qkv, k.t(), 0.0, &mut sc, View::rows(0, s));
                for i in 0..s {
                    let row = &mut sc[i * s..(i + 1) * s];
                    softmax_inplace(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm_view(s, s, dh, 1.0, &sc, View::rows(0, s), qkv, v, 0.0, att, View::rows(l.offset * w + h * dh, w));
                probs.push(sc);
            }
        }
        probs
    }

    fn attention_backward(&self, layouts: &[Layout], qkv: &[f64], probs: &[Vec<f64>], datt: &[f64], dqkv: &mut [f64]) {
        let w = self.config.width;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut idx = 0;
        for l in layouts {
            let s = l.len;
            for h in 0..self.config.heads {
                let pr = &probs[idx];
                idx += 1;
                let q = View::rows(l.offset * 3 * w + h * dh, 3 * w);
                let k = View::rows(l.offset * 3 * w + w + h * dh, 3 * w);
                let v = View::rows(l.offset * 3 * w + 2 * w + h * dh, 3 * w);
                let da = View::rows(l.offset * w + h * dh, w);
                let sq = View::rows(0, s);
                let mut dp = vec![0.0; s * s];
                gemm_view(s, dh, s, 1.0, datt, da, qkv, v.t(), 0.0, &mut dp, sq);
                gemm_view(s, s, dh, 1.0, pr, sq.t(), datt, da, 1.0, dqkv, v);
                for i in 0..s {
                    let (p_row, d_row) = (&pr[i * s..i * s + i + 1], &mut dp[i * s..(i + 1) * s]);
                    let dot: f64 = p_row.iter().zip(d_row.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        d_row[j] = p_row[j] * (d_row[j] - dot);
                    }
                    d_row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm_view(s, s, dh, scale, &dp, sq, qkv, k, 1.0, dqkv, q);
                gemm_view(s, s, dh, scale, &dp, sq.t(), qkv, q, 1.0, dqkv, k);
            }
        }
    }

    /// Wall-clock of the attention core (scores, masked softmax, weighted
    /// sum and their backward) over all layers for one sequence of `len`
    /// positions, averaged over `reps` runs.
    pub fn attention_core_time(&self, len: usize, reps: usize) -> Duration {
        let w = self.config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
        let qkv: Vec<f64> = (0..len * 3 * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let datt: Vec<f64> = (0..len * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let layouts = [Layout {
            offset: 0,
            prefix: 0,
            visual: 0,
            len,
        }];
        let mut att = vec![0.0; len * w];
        let mut dqkv = vec![0.0; len * 3 * w];
        let reps = reps.max(1);
        let t = Instant::now();
        for _ in 0..reps {
            for _ in 0..self.config.layers {
                let probs = self.attention_forward(&layouts, &qkv, &mut att);
                self.attention_backward(&layouts, &qkv, &probs, &datt, &mut dqkv);
            }
        }
        std::hint::black_box(&dqkv);
        t.elapsed() / reps as u32
    }

    /// Backpropagates `dlogits` (`n × 7 × bins`), accumulating into `grads`
    /// and returning the per-example visual-token gradients.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grads: &mut [f64]) -> Vec<Vec<f64>> {
        let p = &self.params;
        let w = self.config.width;
        let rows = cache.rows;
        let n_pred = cache.layouts.len() * ACTION_DIM;
        let dhead = self.head.backward(p, &cache.head_in, dlogits, n_pred, grads);
        let dgathered = self.ln_f.backward(p, &cache.ln_f, &dhead, n_pred, grads);
        let mut dx = vec![0.0; rows * w];
        for (li, l) in cache.layouts.iter().enumerate() {
            for i in 0..ACTION_DIM {
                let r = l.predict_row(i);
                let src = &dgathered[(li * ACTION_DIM + i) * w..(li * ACTION_DIM + i + 1) * w];
                dx[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut dact = b.fc2.backward(p, &c.act, &dx, rows, grads);
            gelu_backward_inplace(&c.pre, &mut dact);
            let dh2 = b.fc1.backward(p, &c.h2, &dact, rows, grads);
            let dres = b.ln2.backward(p, &c.ln2, &dh2, rows, grads);
            dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
            let datt = b.out.backward(p, &c.att, &dx, rows, grads);
            let mut dqkv = vec![0.0; rows * 3 * w];
            self.attention_backward(&cache.layouts, &c.qkv, &c.probs, &datt, &mut dqkv);
            let dh1 = b.qkv.backward(p, &c.h1, &dqkv, rows, grads);
            let dres = b.ln1.backward(p, &c.ln1, &dh1, rows, grads);
            dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
        }
        let dv = self.config.visual_dim;
        let vis_rows = cache.vis_in.len() / dv;
        let mut dvis = vec![0.0; vis_rows * w];
        let mut vrow = 0;
        {
            let gpos = &mut grads[self.pos_emb.range()];
            for l in &cache.layouts {
                for t in 0..l.len {
                    let src = &dx[(l.offset + t) * w..(l.offset + t + 1) * w];
                    gpos[t * w..(t + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        for l in &cache.layouts {
            for t in l.prefix..l.prefix + l.visual {
                let src = &dx[(l.offset + t) * w..(l.offset + t + 1) * w];
                dvis[vrow * w..(vrow + 1) * w].copy_from_slice(src);
                vrow += 1;
            }
        }
        let mut dhidden = self.proj2.backward(p, &cache.vis_hidden, &dvis, vis_rows, grads);
        gelu_backward_inplace(&cache.vis_pre, &mut dhidden);
        let dvin = self.proj1.backward(p, &cache.vis_in, &dhidden, vis_rows, grads);
        let mut out = Vec::with_capacity(cache.layouts.len());
        let mut off = 0;
        for l in &cache.layouts {
            out.push(dvin[off..off + l.visual * dv].to_vec());
            off += l.visual * dv;
        }
        self.token_embedding_backward(cache, &dx, grads);
        out
    }

    fn token_embedding_backward(&self, cache: &ForwardCache, dx: &[f64], grads: &mut [f64]) {
        let w = self.config.width;
        let gtok = &mut grads[self.tok_emb.range()];
        for (r, id) in cache.token_ids.iter().enumerate() {
            if let Some(id) = id {
                gtok[id * w..(id + 1) * w]
                    .iter_mut()
                    .zip(&dx[r * w..(r + 1) * w])
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Mean cross-entropy over the 7 action positions of every example.
    pub fn loss_and_grads(&self, inputs: &[PolicyInput], grads: Option<&mut [f64]>) -> Result<BatchLoss> {
        let cache = self.forward(inputs)?;
        let b = self.bins();
        let n = inputs.len() * ACTION_DIM;
        let mut dlogits = vec![0.0; n * b];
        let mut loss = 0.0;
        let mut correct = 0;
        for (e, inp) in inputs.iter().enumerate() {
            for i in 0..ACTION_DIM {
                let r = e * ACTION_DIM + i;
                let logits = &cache.logits[r * b..(r + 1) * b];
                let target = inp.actions[i];
                if crate::nn::layers::argmax(logits) == target {
                    correct += 1;
                }
                let dl = &mut dlogits[r * b..(r + 1) * b];
                dl.copy_from_slice(logits);
                softmax_inplace(dl);
                loss -= dl[target].max(1e-300).ln();
                dl[target] -= 1.0;
                dl.iter_mut().for_each(|g| *g /= n as f64);
            }
        }
        loss /= n as f64;
        let dvisual = match grads {
            Some(g) => self.backward(&cache, &dlogits, g),
            None => Vec::new(),
        };
        Ok(BatchLoss {
            loss,
            correct,
            total: n,
            dvisual,
        })
    }
}
