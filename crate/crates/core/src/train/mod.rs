//! Training, closed-loop evaluation, ablations and throughput benchmarks.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use ablation::{run_ablation_suite, AblationTable, Variant};
pub use bench::{analytic_ratio, bench_throughput, BenchConfig, ThroughputRow};
pub use config::{DetectorKind, SegmenterKind, TrainConfig};
pub use data::{fit_binning, prepare, PreparedData};
pub use eval::{evaluate, Controller, EvalResult, ExpertController, ModelController, RandomController};
pub use metrics::{export_metrics, summarize, RunMetrics, RunSummary};
pub use model::Model;
pub use trainer::Trainer;

use crate::error::Result;
use crate::gripper::DetectorParams;
use crate::scene::Dataset;

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: RunMetrics,
    pub summary: RunSummary,
}

/// Fits the binning, precomputes perception and trains for `cfg.steps`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, detector: Option<DetectorParams>, on_log: impl FnMut(&metrics::LogRow)) -> Result<TrainOutcome> {
    let binning = fit_binning(dataset, cfg.bins)?;
    let model = Model::new(cfg, detector, binning)?;
    let data = prepare(dataset, &model)?;
    let mut trainer = Trainer::new(cfg.clone(), model, &data)?;
    trainer.run(&data, cfg.steps, on_log)?;
    let summary = summarize(&trainer.metrics, cfg, trainer.step)?;
    Ok(TrainOutcome {
        model: trainer.model,
        metrics: trainer.metrics,
        summary,
    })
}
