//! Visual-token ablations at an equal step budget and shared data order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gripper::DetectorParams;
use crate::scene::{Dataset, Relation};
use crate::tokenizer::{PoolMode, TokenizerMode};

use super::config::TrainConfig;
use super::data::{fit_binning, order_hash, prepare, PreparedData};
use super::eval::{evaluate, ModelController};
use super::model::Model;
use super::trainer::Trainer;

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub mode: TokenizerMode,
    pub pool: PoolMode,
    pub n_slots: usize,
    pub grid_side: usize,
}

impl Variant {
    fn new(name: &str, mode: TokenizerMode, pool: PoolMode) -> Self {
        Self {
            name: name.into(),
            mode,
            pool,
            n_slots: 7,
            grid_side: 3,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            mode: self.mode.name().into(),
            pool: self.pool.name().into(),
            n_slots: self.n_slots,
            grid_side: self.grid_side,
            ..base.clone()
        }
    }
}

/// Single token, object tokens only, and both oat pooling variants.
pub fn token_variants() -> Vec<Variant> {
    vec![
        Variant::new("single-token", TokenizerMode::SingleToken, PoolMode::Attention),
        Variant::new("object-only", TokenizerMode::ObjectOnly, PoolMode::Attention),
        Variant::new("oat (attention pool)", TokenizerMode::Oat, PoolMode::Attention),
        Variant::new("oat (average pool)", TokenizerMode::Oat, PoolMode::Average),
    ]
}

/// Agent window and slot-count alternatives.
pub fn size_variants() -> Vec<Variant> {
    let mut g5 = Variant::new("oat G=5", TokenizerMode::Oat, PoolMode::Average);
    g5.grid_side = 5;
    let mut n15 = Variant::new("oat N=15", TokenizerMode::Oat, PoolMode::Average);
    n15.n_slots = 15;
    vec![g5, n15]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// Success rate per relation in `Relation::ALL` order, pooled over seeds.
    pub per_relation: [f64; 3],
    pub average: f64,
    pub per_seed: Vec<f64>,
    pub final_probe_accuracy: Vec<f64>,
    pub order_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Markdown table: one row per variant, a column per relation and the average.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant |");
        for r in Relation::ALL {
            write!(s, " {} |", r.label()).unwrap();
        }
        s.push_str(" average |\n|---|");
        for _ in Relation::ALL {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        for row in &self.rows {
            write!(s, "| {} |", row.name).unwrap();
            for v in row.per_relation {
                write!(s, " {:.1}% |", 100.0 * v).unwrap();
            }
            writeln!(s, " {:.1}% |", 100.0 * row.average).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant");
        for r in Relation::ALL {
            write!(s, ",{}", r.label()).unwrap();
        }
        s.push_str(",average\n");
        for row in &self.rows {
            s.push_str(&row.name);
            for v in row.per_relation {
                write!(s, ",{v:?}").unwrap();
            }
            writeln!(s, ",{:?}", row.average).unwrap();
        }
        s
    }

    /// Pairs `(a, b)` of the chain where `average(a) < average(b) - tolerance`.
    pub fn ordering_violations(&self, chain: &[&str], tolerance: f64) -> Result<Vec<(String, String, f64, f64)>> {
        let mut out = Vec::new();
        for w in chain.windows(2) {
            let a = self.row(w[0]).ok_or_else(|| Error::Parameter(format!("no variant {:?}", w[0])))?;
            let b = self.row(w[1]).ok_or_else(|| Error::Parameter(format!("no variant {:?}", w[1])))?;
            if a.average < b.average - tolerance {
                out.push((a.name.clone(), b.name.clone(), a.average, b.average));
            }
        }
        Ok(out)
    }
}

/// Trains every variant for every seed at the base step budget and
/// evaluates closed-loop success. All runs share the batch order.
pub fn run_ablation_suite(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    dataset: &Dataset,
    detector: Option<&DetectorParams>,
    mut progress: impl FnMut(&str, u64, f64),
) -> Result<AblationTable> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Parameter("ablation needs at least one variant and one seed".into()));
    }
    let binning = fit_binning(dataset, base.bins)?;
    // Perception depends on the slot count only.
    let mut prepared: BTreeMap<usize, PreparedData> = BTreeMap::new();
    let mut hash = None;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut per_seed = Vec::new();
        let mut probes = Vec::new();
        let mut rel = [(0usize, 0usize); 3];
        let mut row_hash = String::new();
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..v.apply(base) };
            let model = Model::new(&cfg, detector.cloned(), binning.clone())?;
            if let std::collections::btree_map::Entry::Vacant(e) = prepared.entry(cfg.n_slots) {
                e.insert(prepare(dataset, &model)?);
            }
            let data = &prepared[&cfg.n_slots];
            let h = order_hash(cfg.order_seed, data.len(), cfg.steps * cfg.batch);
            match &hash {
                None => hash = Some(h.clone()),
                Some(prev) if *prev != h => {
                    return Err(Error::Data(format!("variant {} sees a different data order", v.name)));
                }
                _ => {}
            }
            row_hash = h;
            let mut trainer = Trainer::new(
                TrainConfig {
                    eval_every: 0,
                    ..cfg.clone()
                },
                model,
                data,
            )?;
            trainer.run(data, cfg.steps, |_| {})?;
            probes.push(trainer.probe_accuracy(data)?);
            let r = evaluate(
                &mut ModelController::new(&trainer.model),
                cfg.eval_rollouts,
                &[cfg.eval_seed],
                cfg.max_rollout_steps,
            )?;
            for (acc, x) in rel.iter_mut().zip(r.by_relation) {
                acc.0 += x.0;
                acc.1 += x.1;
            }
            per_seed.push(r.success_rate());
            progress(&v.name, seed, r.success_rate());
        }
        let per_relation = rel.map(|(s, n)| if n == 0 { 0.0 } else { s as f64 / n as f64 });
        rows.push(AblationRow {
            name: v.name.clone(),
            per_relation,
            average: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
            per_seed,
            final_probe_accuracy: probes,
            order_hash: row_hash,
        });
    }
    Ok(AblationTable { rows })
}
