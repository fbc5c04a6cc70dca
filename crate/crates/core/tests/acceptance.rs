//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `OAT_ACCEPTANCE=1,2,3` to run a subset.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oat_core::encoder::{encoder_grad_check, EncoderConfig, EncoderMode, FeatureEncoder, PatchFeatureGrid};
use oat_core::gripper::{detector_grad_check, samples_from_states, train_detector, DetectorTrainConfig};
use oat_core::imaging::patch_window;
use oat_core::policy::{policy_grad_check, Policy, PolicyConfig, PolicyInput, Vocabulary};
use oat_core::scene::dataset::{build_manifest, generate_episodes};
use oat_core::scene::{sample_task, Dataset, RenderOptions};
use oat_core::tokenizer::{agent_tokens, attention_pool_grad_check, object_tokens, reduction_ratio, tokenize};
use oat_core::train::ablation::{token_variants, AblationRow, AblationTable};
use oat_core::train::bench::{analytic_ratio, bench_throughput, bench_token_counts, median, BenchConfig};
use oat_core::train::data::order_hash;
use oat_core::train::metrics::ACCURACY_THRESHOLD;
use oat_core::train::{
    evaluate, fit_binning, prepare, run_ablation_suite, DetectorKind, EvalResult, Model, ModelController, PreparedData,
    TrainConfig, Trainer,
};
use oat_core::{DetectorParams, KeypointPrediction, MaskSet, PatchGeometry, TokenizerConfig, TokenizerMode};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_features(rng: &mut ChaCha8Rng, geom: PatchGeometry, dim: usize) -> PatchFeatureGrid {
    PatchFeatureGrid::new(geom, dim, (0..geom.k() * dim).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

fn global_mean(feats: &PatchFeatureGrid) -> Vec<f64> {
    let mut m = vec![0.0; feats.dim];
    for k in 0..feats.k() {
        for (a, x) in m.iter_mut().zip(feats.row(k)) {
            *a += x;
        }
    }
    m.iter().map(|x| x / feats.k() as f64).collect()
}

fn token_accounting() -> Outcome {
    let geom = PatchGeometry::new(224, 224, 14).unwrap();
    let cfg = TokenizerConfig::default();
    let count = cfg.token_count(geom.k());
    let ratio = reduction_ratio(&cfg, &geom);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feats = random_features(&mut rng, geom, cfg.dim);
    let masks = MaskSet::new(7, (0..geom.k()).map(|k| k % 7).collect()).unwrap();
    let kp = KeypointPrediction {
        point: Some(geom.patch_center(geom.unflat(100))),
        confidence: 1.0,
    };
    let produced = tokenize(&feats, &masks, &kp, &cfg, None).unwrap().len();
    outcome(
        geom.k() == 256 && count == 16 && produced == 16 && ratio == 0.9375,
        format!("{} patches -> {count} tokens ({produced} produced), reduction ratio {ratio}", geom.k()),
    )
}

fn pooling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_token, mut worst_mean) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let side = rng.gen_range(2..=16);
        let geom = PatchGeometry::new(side * 4, side * 4, 4).unwrap();
        let dim = rng.gen_range(1..=16);
        let n = rng.gen_range(1..=12);
        let feats = random_features(&mut rng, geom, dim);
        let assignment: Vec<usize> = (0..geom.k()).map(|_| rng.gen_range(0..n)).collect();
        let masks = MaskSet::new(n, assignment.clone()).unwrap();
        let toks = object_tokens(&feats, &masks, None).unwrap();

        let mut sums = vec![vec![0.0; dim]; n];
        let mut counts = vec![0usize; n];
        for (k, &s) in assignment.iter().enumerate() {
            counts[s] += 1;
            for d in 0..dim {
                sums[s][d] += feats.features[k * dim + d];
            }
        }
        let mut weighted = vec![0.0; dim];
        for s in 0..n {
            for d in 0..dim {
                let oracle = if counts[s] == 0 { 0.0 } else { sums[s][d] / counts[s] as f64 };
                worst_token = worst_token.max((toks.token(s)[d] - oracle).abs());
                weighted[d] += counts[s] as f64 * toks.token(s)[d];
            }
        }
        for (w, m) in weighted.iter().zip(global_mean(&feats)) {
            worst_mean = worst_mean.max((w / geom.k() as f64 - m).abs());
        }
    }
    outcome(
        worst_token <= 1e-9 && worst_mean <= 1e-9,
        format!("1000 instances, max token error {worst_token:.2e}, max mean error {worst_mean:.2e}"),
    )
}

fn agent_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut failures = Vec::new();
    for side in [8usize, 16] {
        let geom = PatchGeometry::new(side * 14, side * 14, 14).unwrap();
        let feats = random_features(&mut rng, geom, 9);
        for k in 0..geom.k() {
            let p = geom.unflat(k);
            let window = patch_window(&geom, p, 3).unwrap();
            let mut flat: Vec<usize> = window.iter().map(|&w| geom.flat(w)).collect();
            let in_bounds = window.iter().all(|w| w.row < geom.grid_h && w.col < geom.grid_w);
            let kp = KeypointPrediction {
                point: Some(geom.patch_center(p)),
                confidence: 1.0,
            };
            let toks = agent_tokens(&feats, &kp, 3).unwrap();
            let bit_equal = toks.len() == 9 && flat.iter().enumerate().all(|(i, &f)| toks.token(i) == feats.row(f));
            flat.sort_unstable();
            flat.dedup();
            if window.len() != 9 || !in_bounds || flat.len() != 9 || !flat.contains(&k) || !bit_equal {
                failures.push(format!("{side}x{side} patch {k}"));
            }
            checked += 1;
        }
        let fallback = agent_tokens(&feats, &KeypointPrediction::none(), 3).unwrap();
        let mean = global_mean(&feats);
        let identical = (0..fallback.len()).all(|i| fallback.token(i) == fallback.token(0));
        let close = fallback.token(0).iter().zip(&mean).all(|(a, b)| (a - b).abs() <= 1e-12);
        if fallback.len() != 9 || !identical || !close {
            failures.push(format!("{side}x{side} fallback"));
        }
    }
    outcome(
        failures.is_empty(),
        format!("{checked} keypoint patches plus 2 fallbacks, failures: {:?}", failures),
    )
}

fn gradients() -> Outcome {
    const COORDS: usize = 24;
    let geom = PatchGeometry::new(112, 112, 14).unwrap();
    let enc = FeatureEncoder::new(EncoderConfig::new(EncoderMode::ConvTrained, geom)).unwrap();
    let e = encoder_grad_check(&enc, 4, COORDS).unwrap();

    let p = attention_pool_grad_check(5, COORDS).unwrap();

    let opts = RenderOptions::default();
    let states: Vec<_> = (0..3).map(|s| sample_task(40 + s).0).collect();
    let samples = samples_from_states(&states, &opts, 3).unwrap();
    let det = DetectorParams::learned(112, 14, 6).unwrap();
    let d = detector_grad_check(&det, &samples, 6, COORDS).unwrap();

    let pcfg = PolicyConfig {
        layers: 2,
        width: 32,
        heads: 4,
        mlp_ratio: 2,
        visual_dim: 16,
        max_len: 48,
        seed: 7,
    };
    let policy = Policy::new(pcfg, Vocabulary::for_grammar(16)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let prefixes: Vec<Vec<usize>> = (0..3)
        .map(|s| policy.vocab.encode_instruction(&sample_task(50 + s).1).unwrap())
        .collect();
    let visual: Vec<Vec<f64>> = (0..3).map(|_| (0..16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let inputs: Vec<PolicyInput> = (0..3)
        .map(|i| PolicyInput {
            prefix: &prefixes[i],
            visual: &visual[i],
            actions: std::array::from_fn(|_| rng.gen_range(0..16)),
        })
        .collect();
    let q = policy_grad_check(&policy, &inputs, 7, COORDS).unwrap();

    let checks = [("encoder", e), ("attention pool", p), ("detector", d), ("policy", q)];
    let pass = checks.iter().all(|(_, c)| c.coords.len() >= 20 && c.max_rel_error < 1e-4);
    let detail = checks
        .iter()
        .map(|(n, c)| format!("{n} {:.1e} ({} coords)", c.max_rel_error, c.coords.len()))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, detail)
}

fn dataset(episodes: usize, seed: u64) -> Dataset {
    let opts = RenderOptions::default();
    let eps = generate_episodes(episodes, seed, &opts).unwrap();
    Dataset {
        manifest: build_manifest(seed, &eps, &opts),
        episodes: eps,
    }
}

fn detector_quality(ds: &Dataset) -> (Outcome, DetectorParams) {
    let opts = RenderOptions::default();
    let train = samples_from_states(ds.frames().map(|(_, s)| &s.state), &opts, 5).unwrap();
    let held_eps = dataset(80, 0x4855_4C44);
    let states: Vec<_> = held_eps.frames().map(|(_, s)| s.state.clone()).take(1000).collect();
    let holdout = samples_from_states(&states, &opts, 0).unwrap();
    let t = Instant::now();
    let report = train_detector(&train, &holdout, 112, 14, &DetectorTrainConfig::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let m = report.holdout.unwrap();
    (
        outcome(
            m.frames == 1000 && m.hit_rate >= 0.90 && secs <= 600.0,
            format!(
                "hit rate {:.3} on {} holdout frames, median error {:.2}px, trained in {secs:.0}s",
                m.hit_rate, m.frames, m.median_error
            ),
        ),
        report.params,
    )
}

/// Settings shared by the end-to-end and ablation runs.
fn base_config(detector: DetectorKind) -> TrainConfig {
    TrainConfig {
        detector: detector.name().into(),
        layers: 2,
        width: 64,
        steps: 3000,
        probe_every: 250,
        log_every: 50,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

struct Run {
    steps_to: Option<usize>,
    final_probe: f64,
    eval: EvalResult,
    order_hash: String,
}

fn train_and_evaluate(cfg: &TrainConfig, data: &PreparedData, model: Model) -> Run {
    let mut t = Trainer::new(cfg.clone(), model, data).unwrap();
    t.run(data, cfg.steps, |_| {}).unwrap();
    let eval = evaluate(
        &mut ModelController::new(&t.model),
        cfg.eval_rollouts,
        &[cfg.eval_seed],
        cfg.max_rollout_steps,
    )
    .unwrap();
    Run {
        steps_to: t.metrics.steps_to(ACCURACY_THRESHOLD),
        final_probe: t.metrics.probes.last().map_or(0.0, |p| p.accuracy),
        eval,
        order_hash: order_hash(cfg.order_seed, data.len(), cfg.steps * cfg.batch),
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn end_to_end(ds: &Dataset, detector: &DetectorParams, base: &TrainConfig) -> (Outcome, Vec<Run>) {
    let start = Instant::now();
    let binning = fit_binning(ds, base.bins).unwrap();
    let mut runs: [Vec<Run>; 2] = [Vec::new(), Vec::new()];
    let mut data: Option<PreparedData> = None;
    for (i, mode) in ["oat", "full-patch"].into_iter().enumerate() {
        for seed in SEEDS {
            let cfg = TrainConfig {
                mode: mode.into(),
                seed,
                ..base.clone()
            };
            let model = Model::new(&cfg, Some(detector.clone()), binning.clone()).unwrap();
            // Perception does not depend on the tokenizer mode.
            let d = data.get_or_insert_with(|| prepare(ds, &model).unwrap());
            let r = train_and_evaluate(&cfg, d, model);
            eprintln!(
                "  {mode} seed {seed}: steps to {ACCURACY_THRESHOLD} {:?}, probe {:.3}, success {:.2}",
                r.steps_to,
                r.final_probe,
                r.eval.success_rate()
            );
            runs[i].push(r);
        }
    }
    let [oat, full] = runs;
    let budget = base.steps;
    // Runs that never cross the threshold count as the full budget, which
    // can only understate their true step count.
    let mean_steps = |rs: &[Run]| rs.iter().map(|r| r.steps_to.unwrap_or(budget) as f64).sum::<f64>() / rs.len() as f64;
    let oat_all_crossed = oat.iter().all(|r| r.steps_to.is_some());
    let ratio = mean_steps(&oat) / mean_steps(&full);
    let steps_branch = oat_all_crossed && ratio <= 0.75;

    let success = |rs: &[Run]| rs.iter().map(|r| r.eval.success_rate()).sum::<f64>() / rs.len() as f64;
    let (s_oat, s_full) = (success(&oat), success(&full));
    let geom = base.geometry().unwrap();
    let bench_cfg = BenchConfig::new(base.policy(0));
    let rows = bench_throughput(
        &bench_cfg,
        &[TokenizerConfig::with_mode(TokenizerMode::Oat), TokenizerConfig::with_mode(TokenizerMode::FullPatch)],
        &geom,
    )
    .unwrap();
    let speedup = rows[0].examples_per_sec / rows[1].examples_per_sec;
    let success_branch = s_oat >= s_full - 0.05 && speedup >= 1.5;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "steps-to-{ACCURACY_THRESHOLD}: oat {:.0} vs full-patch {:.0}{} (ratio {ratio:.2}, need <= 0.75); success oat {:.1}% vs full-patch {:.1}%, throughput {speedup:.2}x, {secs:.0}s of 3600",
        mean_steps(&oat),
        mean_steps(&full),
        if full.iter().any(|r| r.steps_to.is_none()) { "+ (censored)" } else { "" },
        100.0 * s_oat,
        100.0 * s_full,
    );
    (outcome((steps_branch || success_branch) && secs <= 3600.0, detail), oat)
}

fn ablation_row(name: &str, runs: &[Run]) -> AblationRow {
    let mut rel = [(0usize, 0usize); 3];
    for r in runs {
        for (a, x) in rel.iter_mut().zip(r.eval.by_relation) {
            a.0 += x.0;
            a.1 += x.1;
        }
    }
    let per_seed: Vec<f64> = runs.iter().map(|r| r.eval.success_rate()).collect();
    AblationRow {
        name: name.into(),
        per_relation: rel.map(|(s, n)| if n == 0 { 0.0 } else { s as f64 / n as f64 }),
        average: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
        per_seed,
        final_probe_accuracy: runs.iter().map(|r| r.final_probe).collect(),
        order_hash: runs[0].order_hash.clone(),
    }
}

fn ablation(ds: &Dataset, detector: &DetectorParams, base: &TrainConfig, oat_average: &[Run]) -> Outcome {
    let variants: Vec<_> = token_variants().into_iter().filter(|v| v.name != "oat (average pool)").collect();
    let mut table = run_ablation_suite(base, &variants, &SEEDS, ds, Some(detector), |name, seed, rate| {
        eprintln!("  {name} seed {seed}: success {rate:.2}");
    })
    .unwrap();
    let shared = ablation_row("oat (average pool)", oat_average);
    let same_order = table.rows.iter().all(|r| r.order_hash == shared.order_hash);
    table.rows.push(shared);
    let order = ["single-token", "object-only", "oat (attention pool)", "oat (average pool)"];
    table.rows.sort_by_key(|r| order.iter().position(|n| *n == r.name));
    let table = AblationTable { rows: table.rows };
    for line in table.to_markdown().lines() {
        eprintln!("  {line}");
    }
    let chain = ["oat (average pool)", "oat (attention pool)", "object-only", "single-token"];
    let violations = table.ordering_violations(&chain, 0.03).unwrap();
    for (a, b, x, y) in &violations {
        println!(
            "DEVIATION criterion 7: {a} averages {:.1}% but {b} averages {:.1}%, outside the 3-point band",
            100.0 * x,
            100.0 * y
        );
    }
    let averages = table
        .rows
        .iter()
        .map(|r| format!("{} {:.1}%", r.name, 100.0 * r.average))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = if violations.is_empty() {
        format!("ordering holds within 3 points: {averages}")
    } else {
        format!("{} ordering deviation(s) reported: {averages}", violations.len())
    };
    outcome(same_order, detail)
}

fn attention_cost() -> Outcome {
    let policy = PolicyConfig {
        layers: 4,
        width: 128,
        heads: 4,
        mlp_ratio: 4,
        visual_dim: 64,
        max_len: 0,
        seed: 0,
    };
    let cfg = BenchConfig {
        reps: 5,
        attention_reps: 10,
        attention_rounds: 31,
        ..BenchConfig::new(policy)
    };
    let ts = [1usize, 7, 16, 32, 64, 128, 256];
    let entries: Vec<(String, usize)> = ts.iter().map(|t| (format!("T={t}"), *t)).collect();
    let rows = bench_token_counts(&cfg, &entries).unwrap();
    let total_monotone = rows.windows(2).all(|w| w[0].seconds_per_example < w[1].seconds_per_example);
    let attn_monotone = rows.windows(2).all(|w| w[0].attention_seconds < w[1].attention_seconds);
    let base = rows.iter().find(|r| r.visual_tokens == 16).unwrap();
    let mut within = true;
    let mut ratios = Vec::new();
    for r in rows.iter().filter(|r| r.visual_tokens >= 64) {
        // Paired by round: both samples saw the same machine state.
        let measured = median(
            r.attention_rounds
                .iter()
                .zip(&base.attention_rounds)
                .map(|(a, b)| a / b)
                .collect(),
        );
        let analytic = analytic_ratio(cfg.prefix_len, r.visual_tokens, 16);
        within &= measured <= 2.0 * analytic && measured >= analytic / 2.0;
        ratios.push(format!("T={} {measured:.2} vs {analytic:.2}", r.visual_tokens));
    }
    let per_example = rows
        .iter()
        .map(|r| format!("{:.1}", 1e3 * r.seconds_per_example))
        .collect::<Vec<_>>()
        .join("/");
    let attention = rows
        .iter()
        .map(|r| format!("{:.2}", 1e3 * r.attention_seconds))
        .collect::<Vec<_>>()
        .join("/");
    outcome(
        total_monotone && attn_monotone && within,
        format!(
            "ms per example over T={ts:?}: {per_example} (attention core {attention}); attention-core ratio to T=16: {}",
            ratios.join(", ")
        ),
    )
}

fn reproducibility(ds: &Dataset, detector: &DetectorParams) -> Outcome {
    let mut mismatched = Vec::new();
    let small = Dataset {
        manifest: ds.manifest.clone(),
        episodes: ds.episodes[..12].to_vec(),
    };
    for (mode, pool) in [("oat", "average"), ("oat", "attention"), ("full-patch", "average"), ("single-token", "attention")] {
        let cfg = TrainConfig {
            mode: mode.into(),
            pool: pool.into(),
            steps: 60,
            log_every: 5,
            probe_every: 20,
            probe_frames: 32,
            eval_every: 30,
            eval_rollouts: 4,
            seed: 11,
            ..base_config(DetectorKind::Learned)
        };
        let run = || {
            let binning = fit_binning(&small, cfg.bins).unwrap();
            let model = Model::new(&cfg, Some(detector.clone()), binning).unwrap();
            let data = prepare(&small, &model).unwrap();
            let mut t = Trainer::new(cfg.clone(), model, &data).unwrap();
            t.run(&data, cfg.steps, |_| {}).unwrap();
            [t.metrics.metrics_csv(), t.metrics.probes_csv(), t.metrics.evals_csv()]
        };
        if run() != run() {
            mismatched.push(format!("{mode}/{pool}"));
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("4 configurations run twice, metrics/probes/evals CSVs differing: {mismatched:?}"),
    )
}

fn report(id: usize, name: &str, elapsed: Duration, o: &Outcome) {
    println!(
        "{} criterion {id} ({name}, {:.1}s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        o.detail
    );
}

fn main() {
    let selected: Vec<usize> = match std::env::var("OAT_ACCEPTANCE") {
        Ok(s) if !s.trim().is_empty() => s.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    };
    let want = |i: usize| selected.contains(&i);
    let mut all_pass = true;
    let mut record = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(id, name, t.elapsed(), &o);
        all_pass &= o.pass;
    };

    if want(1) {
        record(1, "token accounting", &mut token_accounting);
    }
    if want(2) {
        record(2, "pooling oracle", &mut pooling_oracle);
    }
    if want(3) {
        record(3, "agent geometry", &mut agent_geometry);
    }
    if want(4) {
        record(4, "gradients", &mut gradients);
    }

    if [5, 6, 7, 9].iter().any(|&i| want(i)) {
        let ds = dataset(320, 0);
        eprintln!("dataset: {} episodes, {} frames", ds.episodes.len(), ds.frame_count());
        let mut detector = None;
        record(5, "detector quality", &mut || {
            let (o, d) = detector_quality(&ds);
            detector = Some(d);
            o
        });
        let detector = detector.unwrap();
        let base = base_config(DetectorKind::Learned);
        let mut oat_runs = Vec::new();
        if want(6) || want(7) {
            record(6, "end-to-end", &mut || {
                let (o, runs) = end_to_end(&ds, &detector, &base);
                oat_runs = runs;
                o
            });
        }
        if want(7) {
            record(7, "ablation ordering", &mut || ablation(&ds, &detector, &base, &oat_runs));
        }
        if want(9) {
            record(9, "reproducibility", &mut || reproducibility(&ds, &detector));
        }
    }
    if want(8) {
        record(8, "attention cost", &mut attention_cost);
    }

    if !all_pass {
        std::process::exit(1);
    }
}
