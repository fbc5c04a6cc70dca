//! Run metrics and their on-disk export.
//!
//! `metrics.csv`, `probes.csv`, `evals.csv` and `summary.toml` hold only
//! values that are a function of the config and seeds; wall-clock
//! measurements go to `timing.csv`.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, IoContext, Result};

use super::config::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// Teacher-forced accuracy on the step's batch.
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingRow {
    pub step: usize,
    pub examples_per_sec: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRow {
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub success_rate: f64,
    pub stderr: f64,
    pub successes: usize,
    pub rollouts: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub log: Vec<LogRow>,
    pub timing: Vec<TimingRow>,
    pub probes: Vec<ProbeRow>,
    pub evals: Vec<EvalRow>,
}

fn check_monotone(last: Option<usize>, step: usize) -> Result<()> {
    match last {
        Some(l) if l >= step => Err(Error::Parameter(format!("metric step {step} after {l}"))),
        _ => Ok(()),
    }
}

impl RunMetrics {
    pub fn push_log(&mut self, row: LogRow) -> Result<()> {
        check_monotone(self.log.last().map(|r| r.step), row.step)?;
        self.log.push(row);
        Ok(())
    }

    pub fn push_timing(&mut self, row: TimingRow) -> Result<()> {
        check_monotone(self.timing.last().map(|r| r.step), row.step)?;
        self.timing.push(row);
        Ok(())
    }

    pub fn push_probe(&mut self, row: ProbeRow) -> Result<()> {
        check_monotone(self.probes.last().map(|r| r.step), row.step)?;
        self.probes.push(row);
        Ok(())
    }

    pub fn push_eval(&mut self, row: EvalRow) -> Result<()> {
        check_monotone(self.evals.last().map(|r| r.step), row.step)?;
        self.evals.push(row);
        Ok(())
    }

    /// First probed step whose accuracy reaches `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.probes.iter().find(|p| p.accuracy >= threshold).map(|p| p.step)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,loss,accuracy\n");
        for r in &self.log {
            writeln!(s, "{},{:?},{:?}", r.step, r.loss, r.accuracy).unwrap();
        }
        s
    }

    pub fn probes_csv(&self) -> String {
        let mut s = String::from("step,probe_accuracy\n");
        for r in &self.probes {
            writeln!(s, "{},{:?}", r.step, r.accuracy).unwrap();
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = String::from("step,success_rate,stderr,successes,rollouts\n");
        for r in &self.evals {
            writeln!(s, "{},{:?},{:?},{},{}", r.step, r.success_rate, r.stderr, r.successes, r.rollouts).unwrap();
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,examples_per_sec,wall_seconds\n");
        for r in &self.timing {
            writeln!(s, "{},{:.3},{:.3}", r.step, r.examples_per_sec, r.wall_seconds).unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub mode: String,
    pub pool: String,
    pub seed: u64,
    pub order_seed: u64,
    pub data_seed: u64,
    pub eval_seed: u64,
    pub steps: usize,
    pub examples: usize,
    pub visual_tokens: usize,
    pub reduction_ratio: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_probe_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_to_threshold: Option<usize>,
    pub accuracy_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_success_rate: Option<f64>,
}

pub const ACCURACY_THRESHOLD: f64 = 0.90;

pub fn summarize(run: &RunMetrics, cfg: &TrainConfig, steps: usize) -> Result<RunSummary> {
    let tok = cfg.tokenizer()?;
    let geom = cfg.geometry()?;
    let last = run.log.last().copied().unwrap_or(LogRow {
        step: 0,
        loss: f64::NAN,
        accuracy: 0.0,
    });
    Ok(RunSummary {
        config_hash: cfg.hash(),
        mode: cfg.mode.clone(),
        pool: cfg.pool.clone(),
        seed: cfg.seed,
        order_seed: cfg.order_seed,
        data_seed: cfg.data_seed,
        eval_seed: cfg.eval_seed,
        steps,
        examples: steps * cfg.batch,
        visual_tokens: tok.token_count(geom.k()),
        reduction_ratio: crate::tokenizer::reduction_ratio(&tok, &geom),
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        final_probe_accuracy: run.probes.last().map(|p| p.accuracy),
        steps_to_threshold: run.steps_to(ACCURACY_THRESHOLD),
        accuracy_threshold: ACCURACY_THRESHOLD,
        final_success_rate: run.evals.last().map(|e| e.success_rate),
    })
}

/// Writes `path` through a temporary sibling and a rename, so readers never
/// see a half-written file.
fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

/// Writes the CSV files and `summary.toml` into `dir`. Re-exporting the same
/// run produces the same bytes.
pub fn export_metrics(run: &RunMetrics, summary: &RunSummary, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    write_atomic(&dir.join("metrics.csv"), &run.metrics_csv())?;
    write_atomic(&dir.join("probes.csv"), &run.probes_csv())?;
    write_atomic(&dir.join("evals.csv"), &run.evals_csv())?;
    write_atomic(&dir.join("timing.csv"), &run.timing_csv())?;
    let text = toml::to_string(summary).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join("summary.toml"), &text)
}
