//! Behavior cloning: encoder, optional attention pool and policy trained
//! jointly on teacher-forced action-token cross-entropy.

use std::io::Cursor;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::{BlobReader, BlobWriter};
use crate::encoder::{EncoderCache, PatchFeatureGrid};
use crate::error::{Error, IoContext, Result};
use crate::nn::Adam;
use crate::policy::{action_token_accuracy, PolicyInput};
use crate::tokenizer::{tokenize_backward, tokenize_cached, TokenCache};

use super::config::TrainConfig;
use super::data::{probe_indices, BatchOrder, PreparedData};
use super::eval::{evaluate, ModelController};
use super::metrics::{EvalRow, LogRow, ProbeRow, RunMetrics, TimingRow};
use super::model::Model;

pub const STATE_MAGIC: &[u8; 8] = b"OATTRST1";
pub const STATE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    /// Completed optimizer steps.
    pub step: usize,
    pub metrics: RunMetrics,
    opt_policy: Adam,
    opt_encoder: Adam,
    opt_pool: Adam,
    order: BatchOrder,
    probe: Vec<usize>,
    window: (Instant, usize),
    started: Instant,
}

struct Encoded {
    feats: PatchFeatureGrid,
    enc: EncoderCache,
    tok: TokenCache,
    tokens: Vec<f64>,
}

fn adam(n: usize, cfg: &TrainConfig) -> Adam {
    let mut a = Adam::new(n);
    a.weight_decay = cfg.weight_decay;
    // Clipping is applied jointly across all parameter groups.
    a.clip_norm = 0.0;
    a
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Model, data: &PreparedData) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("no training frames".into()));
        }
        let opt_policy = adam(model.policy.params.len(), &cfg);
        let opt_encoder = adam(model.encoder.params.len(), &cfg);
        let opt_pool = adam(model.pool.as_ref().map_or(0, |p| p.params.len()), &cfg);
        Ok(Self {
            order: BatchOrder::new(cfg.order_seed, data.len()),
            probe: probe_indices(data.len(), cfg.probe_frames),
            cfg,
            model,
            step: 0,
            metrics: RunMetrics::default(),
            opt_policy,
            opt_encoder,
            opt_pool,
            window: (Instant::now(), 0),
            started: Instant::now(),
        })
    }

    pub fn examples_processed(&self) -> usize {
        self.step * self.cfg.batch
    }

    fn encode(&self, data: &PreparedData, i: usize) -> Result<Encoded> {
        let f = &data.frames[i];
        let (feats, enc) = self.model.encoder.forward(&data.image(i))?;
        let (tokens, tok) = tokenize_cached(&feats, &f.masks, &f.keypoint, &self.model.tokenizer, self.model.pool.as_ref())?;
        Ok(Encoded {
            feats,
            enc,
            tok,
            tokens: tokens.tokens,
        })
    }

    /// Loss and gradients for a set of frames without updating anything.
    pub fn batch_gradients(&self, data: &PreparedData, idx: &[usize]) -> Result<(StepStats, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let encoded = idx.iter().map(|&i| self.encode(data, i)).collect::<Result<Vec<_>>>()?;
        let inputs: Vec<PolicyInput> = idx
            .iter()
            .zip(&encoded)
            .map(|(&i, e)| PolicyInput {
                prefix: &data.frames[i].prefix,
                visual: &e.tokens,
                actions: data.frames[i].bins,
            })
            .collect();
        let m = &self.model;
        let mut g_policy = m.policy.params.zeros_like();
        let r = m.policy.loss_and_grads(&inputs, Some(&mut g_policy))?;
        let mut g_encoder = m.encoder.params.zeros_like();
        let mut g_pool = m.pool.as_ref().map_or_else(Vec::new, |p| p.params.zeros_like());
        let needs_feature_grads = m.encoder.trainable() || m.pool.is_some();
        if needs_feature_grads {
            for (e, dvis) in encoded.iter().zip(&r.dvisual) {
                let pool_grads = m.pool.as_ref().map(|_| g_pool.as_mut_slice());
                let dfeats = tokenize_backward(&e.feats, &e.tok, m.pool.as_ref(), dvis, pool_grads);
                m.encoder.backward(&e.enc, &dfeats, &mut g_encoder);
            }
        }
        let stats = StepStats {
            step: self.step + 1,
            loss: r.loss,
            accuracy: r.correct as f64 / r.total as f64,
        };
        Ok((stats, g_policy, g_encoder, g_pool))
    }

    /// One optimizer step on the next batch of the order.
    pub fn train_step(&mut self, data: &PreparedData) -> Result<StepStats> {
        let idx = self.order.batch(self.step, self.cfg.batch);
        let (stats, mut gp, mut ge, mut gq) = self.batch_gradients(data, &idx)?;
        let norm = [&gp, &ge, &gq].iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if !stats.loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                step: stats.step,
                detail: format!(
                    "loss {}, gradient norm {norm}, lr {}, frames {idx:?}",
                    stats.loss,
                    self.cfg.lr_at(stats.step)
                ),
            });
        }
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let s = self.cfg.clip_norm / norm;
            for g in [&mut gp, &mut ge, &mut gq] {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        let lr = self.cfg.lr_at(stats.step);
        self.opt_policy.update(&mut self.model.policy.params.values, &gp, lr);
        if self.model.encoder.trainable() {
            self.opt_encoder.update(&mut self.model.encoder.params.values, &ge, lr);
        }
        if let Some(p) = self.model.pool.as_mut() {
            self.opt_pool.update(&mut p.params.values, &gq, lr);
        }
        self.step = stats.step;
        Ok(stats)
    }

    /// Teacher-forced accuracy over the fixed probe frames.
    pub fn probe_accuracy(&self, data: &PreparedData) -> Result<f64> {
        let encoded = self.probe.iter().map(|&i| self.encode(data, i)).collect::<Result<Vec<_>>>()?;
        let inputs: Vec<PolicyInput> = self
            .probe
            .iter()
            .zip(&encoded)
            .map(|(&i, e)| PolicyInput {
                prefix: &data.frames[i].prefix,
                visual: &e.tokens,
                actions: data.frames[i].bins,
            })
            .collect();
        action_token_accuracy(&self.model.policy, &inputs, self.cfg.batch)
    }

    /// Trains until `self.step == steps`, recording metrics on the configured
    /// intervals. `on_log` sees every logged row.
    pub fn run(&mut self, data: &PreparedData, steps: usize, mut on_log: impl FnMut(&LogRow)) -> Result<()> {
        self.window = (Instant::now(), 0);
        while self.step < steps {
            let s = self.train_step(data)?;
            self.window.1 += self.cfg.batch;
            if s.step % self.cfg.log_every == 0 {
                let row = LogRow {
                    step: s.step,
                    loss: s.loss,
                    accuracy: s.accuracy,
                };
                self.metrics.push_log(row)?;
                let dt = self.window.0.elapsed().as_secs_f64().max(1e-9);
                self.metrics.push_timing(TimingRow {
                    step: s.step,
                    examples_per_sec: self.window.1 as f64 / dt,
                    wall_seconds: self.started.elapsed().as_secs_f64(),
                })?;
                self.window = (Instant::now(), 0);
                on_log(&row);
            }
            if self.cfg.probe_every > 0 && s.step % self.cfg.probe_every == 0 {
                let accuracy = self.probe_accuracy(data)?;
                self.metrics.push_probe(ProbeRow { step: s.step, accuracy })?;
            }
            if self.cfg.eval_every > 0 && self.cfg.eval_rollouts > 0 && s.step % self.cfg.eval_every == 0 {
                let r = evaluate(
                    &mut ModelController::new(&self.model),
                    self.cfg.eval_rollouts,
                    &[self.cfg.eval_seed],
                    self.cfg.max_rollout_steps,
                )?;
                self.metrics.push_eval(EvalRow {
                    step: s.step,
                    success_rate: r.success_rate(),
                    stderr: r.stderr(),
                    successes: r.successes,
                    rollouts: r.rollouts,
                })?;
            }
        }
        Ok(())
    }

    /// Model, optimizer moments, step counter and deterministic metrics.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(STATE_MAGIC, STATE_VERSION);
        w.str(&self.cfg.to_toml());
        w.u64(self.step as u64);
        w.bytes(&self.model.to_bytes());
        for a in [&self.opt_policy, &self.opt_encoder, &self.opt_pool] {
            w.u64(a.step);
            w.f64s(&a.m);
            w.f64s(&a.v);
        }
        let m = &self.metrics;
        w.usizes(&m.log.iter().map(|r| r.step).collect::<Vec<_>>());
        w.f64s(&m.log.iter().map(|r| r.loss).collect::<Vec<_>>());
        w.f64s(&m.log.iter().map(|r| r.accuracy).collect::<Vec<_>>());
        w.usizes(&m.probes.iter().map(|r| r.step).collect::<Vec<_>>());
        w.f64s(&m.probes.iter().map(|r| r.accuracy).collect::<Vec<_>>());
        w.usizes(&m.evals.iter().flat_map(|r| [r.step, r.successes, r.rollouts]).collect::<Vec<_>>());
        w.finish()
    }

    pub fn from_state_bytes(bytes: &[u8], data: &PreparedData) -> Result<Self> {
        let mut r = BlobReader::new(Cursor::new(bytes), STATE_MAGIC, STATE_VERSION)?;
        let cfg = TrainConfig::from_toml(&r.str()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let step = r.usize()?;
        let model = Model::from_bytes(&r.bytes()?)?;
        let mut t = Self::new(cfg, model, data)?;
        for a in [&mut t.opt_policy, &mut t.opt_encoder, &mut t.opt_pool] {
            a.step = r.u64()?;
            let (m, v) = (r.f64s()?, r.f64s()?);
            if m.len() != a.m.len() || v.len() != a.v.len() {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            a.m = m;
            a.v = v;
        }
        let (steps, losses, accs) = (r.usizes()?, r.f64s()?, r.f64s()?);
        for ((step, loss), accuracy) in steps.into_iter().zip(losses).zip(accs) {
            t.metrics.push_log(LogRow { step, loss, accuracy })?;
        }
        let (steps, accs) = (r.usizes()?, r.f64s()?);
        for (step, accuracy) in steps.into_iter().zip(accs) {
            t.metrics.push_probe(ProbeRow { step, accuracy })?;
        }
        for e in r.usizes()?.chunks(3) {
            let (successes, rollouts) = (e[1], e[2]);
            let p = if rollouts == 0 { 0.0 } else { successes as f64 / rollouts as f64 };
            t.metrics.push_eval(EvalRow {
                step: e[0],
                success_rate: p,
                stderr: if rollouts == 0 { 0.0 } else { (p * (1.0 - p) / rollouts as f64).sqrt() },
                successes,
                rollouts,
            })?;
        }
        r.expect_end()?;
        t.step = step;
        Ok(t)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.state_bytes()).at(path)
    }

    pub fn load_state(path: &Path, data: &PreparedData) -> Result<Self> {
        Self::from_state_bytes(&std::fs::read(path).at(path)?, data)
    }
}
