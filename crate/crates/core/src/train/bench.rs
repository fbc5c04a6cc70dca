//! Per-example policy cost as a function of the visual token budget.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::PatchGeometry;
use crate::policy::{Policy, PolicyConfig, PolicyInput, Vocabulary, ACTION_DIM, BOS, SEP};
use crate::tokenizer::{PoolMode, TokenizerConfig, TokenizerMode};

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputRow {
    pub label: String,
    pub visual_tokens: usize,
    pub seq_len: usize,
    /// Per-layer attention score entries, `(J + T + 7)²`.
    pub attention_ops: usize,
    /// Forward + backward wall-clock per example.
    pub seconds_per_example: f64,
    pub examples_per_sec: f64,
    /// Attention-core wall-clock per example (all layers), median of rounds.
    pub attention_seconds: f64,
    /// Attention-core wall-clock of each round, in round order.
    pub attention_rounds: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchConfig {
    pub policy: PolicyConfig,
    /// Language positions `J`, including BOS and SEP.
    pub prefix_len: usize,
    pub batch: usize,
    pub reps: usize,
    /// Attention-core calls per timed sample.
    pub attention_reps: usize,
    pub attention_rounds: usize,
}

impl BenchConfig {
    pub fn new(policy: PolicyConfig) -> Self {
        Self {
            policy,
            prefix_len: 12,
            batch: 8,
            reps: 5,
            attention_reps: 10,
            attention_rounds: 15,
        }
    }
}

/// `((J + big + 7) / (J + small + 7))²`.
pub fn analytic_ratio(j: usize, big: usize, small: usize) -> f64 {
    let a = (j + big + ACTION_DIM) as f64;
    let b = (j + small + ACTION_DIM) as f64;
    (a / b).powi(2)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => xs[n / 2],
        _ => 0.5 * (xs[n / 2 - 1] + xs[n / 2]),
    }
}

fn timed(mut f: impl FnMut()) -> Duration {
    let t = Instant::now();
    f();
    t.elapsed()
}

/// Times a fixed-size policy on synthetic inputs for each `(label, T)`.
/// Rounds visit every entry in turn so slow phases of a shared machine hit
/// all token counts alike. The attention core gets its own short rounds;
/// samples from one round are comparable with each other.
pub fn bench_token_counts(cfg: &BenchConfig, entries: &[(String, usize)]) -> Result<Vec<ThroughputRow>> {
    let max_t = entries.iter().map(|e| e.1).max().unwrap_or(1);
    let pcfg = PolicyConfig {
        max_len: cfg.policy.max_len.max(Policy::sequence_len(cfg.prefix_len, max_t)),
        ..cfg.policy
    };
    let vocab = Vocabulary::for_grammar(64);
    let policy = Policy::new(pcfg, vocab.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut prefix = vec![BOS];
    prefix.extend((2..cfg.prefix_len).map(|i| 2 + i % vocab.words().len()));
    prefix.push(SEP);
    let visual: Vec<Vec<Vec<f64>>> = entries
        .iter()
        .map(|(_, t)| {
            (0..cfg.batch)
                .map(|_| (0..t * pcfg.visual_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        })
        .collect();
    let inputs: Vec<Vec<PolicyInput>> = visual
        .iter()
        .map(|batch| {
            batch
                .iter()
                .map(|v| PolicyInput {
                    prefix: &prefix,
                    visual: v,
                    actions: [0, 1, 2, 3, 4, 5, 6],
                })
                .collect()
        })
        .collect();
    let seq_lens: Vec<usize> = entries.iter().map(|(_, t)| Policy::sequence_len(prefix.len(), *t)).collect();
    let mut grads = policy.params.zeros_like();
    let mut best = vec![Duration::MAX; entries.len()];
    // The first round warms caches and allocations and is discarded.
    for round in 0..=cfg.reps.max(1) {
        for (i, batch) in inputs.iter().enumerate() {
            let mut failure = None;
            let step = timed(|| {
                if let Err(e) = policy.loss_and_grads(batch, Some(&mut grads)) {
                    failure = Some(e);
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            if round > 0 {
                best[i] = best[i].min(step);
            }
        }
    }
    let mut attention = vec![Vec::new(); entries.len()];
    for round in 0..=cfg.attention_rounds.max(1) {
        for (i, &len) in seq_lens.iter().enumerate() {
            let d = policy.attention_core_time(len, cfg.attention_reps).as_secs_f64();
            if round > 0 {
                attention[i].push(d);
            }
        }
    }
    Ok(entries
        .iter()
        .zip(seq_lens)
        .zip(best)
        .zip(attention)
        .map(|((((label, t), seq_len), step), rounds)| {
            let per_example = step.as_secs_f64() / cfg.batch as f64;
            ThroughputRow {
                label: label.clone(),
                visual_tokens: *t,
                seq_len,
                attention_ops: seq_len * seq_len,
                seconds_per_example: per_example,
                examples_per_sec: 1.0 / per_example,
                attention_seconds: median(rounds.clone()),
                attention_rounds: rounds,
            }
        })
        .collect())
}

pub fn tokenizer_label(t: &TokenizerConfig) -> String {
    match (t.mode, t.pool) {
        (TokenizerMode::Oat | TokenizerMode::ObjectOnly, PoolMode::Attention) => format!("{}+attention", t.mode.name()),
        _ => t.mode.name().to_string(),
    }
}

/// One row per tokenizer config at a fixed policy size.
pub fn bench_throughput(cfg: &BenchConfig, tokenizers: &[TokenizerConfig], geom: &PatchGeometry) -> Result<Vec<ThroughputRow>> {
    let entries: Vec<(String, usize)> = tokenizers
        .iter()
        .map(|t| (tokenizer_label(t), t.token_count(geom.k())))
        .collect();
    bench_token_counts(cfg, &entries)
}

pub fn throughput_table(rows: &[ThroughputRow]) -> String {
    let mut s = String::from("label,visual_tokens,seq_len,attention_ops,seconds_per_example,examples_per_sec,attention_seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6e},{:.2},{:.6e}\n",
            r.label, r.visual_tokens, r.seq_len, r.attention_ops, r.seconds_per_example, r.examples_per_sec, r.attention_seconds
        ));
    }
    s
}
