use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use oat_core::gripper::{overlay_keypoint, samples_from_states, train_detector, DetectorMetrics, DetectorTrainConfig};
use oat_core::imaging::{decode_png, encode_png};
use oat_core::policy::PolicyConfig;
use oat_core::scene::dataset::generate_episodes;
use oat_core::scene::{generate_dataset, load_dataset, Dataset, Relation, RenderOptions};
use oat_core::segment::{overlay_masks, segment_unsupervised};
use oat_core::tokenizer::{reduction_ratio, Provenance, TokenizerConfig, TokenizerMode};
use oat_core::train::ablation::{size_variants, token_variants};
use oat_core::train::bench::{analytic_ratio, bench_token_counts, throughput_table, tokenizer_label};
use oat_core::train::{
    evaluate, export_metrics, fit_binning, prepare, run_ablation_suite, summarize, Controller, DetectorKind, EvalResult,
    ExpertController, Model, ModelController, RandomController, TrainConfig, Trainer,
};
use oat_core::{DetectorParams, Error, Image, PatchGeometry};

#[derive(Parser)]
#[command(name = "oat", version, about = "Object-agent-centric tokenization for small action-token policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert episodes into a dataset directory.
    GenData(GenDataArgs),
    /// Behavior-clone a policy and export metrics.
    Train(TrainArgs),
    /// Closed-loop success rate of a checkpoint or a reference controller.
    Eval(EvalArgs),
    /// Per-example policy cost across visual token budgets.
    Bench(BenchArgs),
    /// Train and evaluate the tokenizer ablations.
    Ablate(AblateArgs),
    /// Print the visual tokens of one dataset frame.
    Tokenize(TokenizeArgs),
    /// Segment a PNG and write a color-coded slot overlay.
    Segment(SegmentArgs),
    /// Locate the gripper in a PNG and write a keypoint overlay.
    Detect(DetectArgs),
    /// Train the gripper keypoint detector on dataset frames.
    TrainDetector(TrainDetectorArgs),
}

/// Config file plus overrides. Explicit flags win over `--set`, which wins
/// over the file.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set width=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    detector_path: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    pool: Option<String>,
    #[arg(long)]
    n_slots: Option<usize>,
    #[arg(long)]
    grid_side: Option<usize>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    segmenter: Option<String>,
    #[arg(long)]
    detector: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    probe_every: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_rollouts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    order_seed: Option<u64>,
    #[arg(long)]
    eval_seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let mut pairs = Vec::new();
        for s in &self.set {
            let Some((k, v)) = s.split_once('=') else {
                return Err(Error::Config(format!("expected KEY=VALUE, got {s:?}")).into());
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        macro_rules! flag {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    pairs.push((stringify!($f).to_string(), v.to_string()));
                }
            )*};
        }
        flag!(
            dataset,
            detector_path,
            mode,
            pool,
            n_slots,
            grid_side,
            encoder,
            segmenter,
            detector,
            layers,
            width,
            heads,
            bins,
            batch,
            lr,
            schedule,
            steps,
            log_every,
            probe_every,
            eval_every,
            eval_rollouts,
            seed,
            order_seed,
            eval_seed
        );
        let cfg = base.with_overrides(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 320)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 112)]
    image_size: usize,
    #[arg(long, default_value_t = 14)]
    patch_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory for the checkpoint, trainer state and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a trainer state written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint; omit to evaluate `--controller`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reference controller when no model is given: expert or random.
    #[arg(long, default_value = "expert")]
    controller: String,
    #[arg(long, default_value_t = 100)]
    rollouts: usize,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',', default_value = "1000003")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 60)]
    max_steps: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Language positions including BOS and SEP.
    #[arg(long, default_value_t = 12)]
    prefix_len: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Extra raw token counts to time alongside the tokenizer modes.
    #[arg(long, value_delimiter = ',')]
    tokens: Vec<usize>,
    #[arg(long, default_value_t = 112)]
    image_size: usize,
    #[arg(long, default_value_t = 14)]
    patch_size: usize,
    /// Write the table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated parameter seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Also run the agent-window and slot-count variants.
    #[arg(long)]
    sizes: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TokenizeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, default_value_t = 0)]
    step: usize,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    n_slots: usize,
    #[arg(long, default_value_t = 14)]
    patch_size: usize,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Detector checkpoint; the color heuristic is used when omitted.
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long, default_value_t = 14)]
    patch_size: usize,
}

#[derive(Args)]
struct TrainDetectorArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Every n-th frame is rendered without the gripper.
    #[arg(long, default_value_t = 5)]
    negative_every: usize,
    /// Holdout frames from freshly generated episodes.
    #[arg(long, default_value_t = 1000)]
    holdout: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 usage or config, 2 data, 3 numeric failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFinite { .. } => 3,
                Error::Data(_) | Error::Io { .. } | Error::Png(_) | Error::Checkpoint(_) | Error::Instruction(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Ablate(a) => ablate(a),
        Command::Tokenize(a) => tokenize(a),
        Command::Segment(a) => segment(a),
        Command::Detect(a) => detect(a),
        Command::TrainDetector(a) => train_detector_cmd(a),
    }
}

fn load_cfg_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    if cfg.dataset.is_empty() {
        return Err(Error::Config("no dataset given (--dataset or `dataset` key)".into()).into());
    }
    let ds = load_dataset(Path::new(&cfg.dataset))?;
    if ds.manifest.image_size != cfg.image_size || ds.manifest.patch_size != cfg.patch_size {
        return Err(Error::Config(format!(
            "dataset is {}px/{}px patches, config {}px/{}px",
            ds.manifest.image_size, ds.manifest.patch_size, cfg.image_size, cfg.patch_size
        ))
        .into());
    }
    Ok(ds)
}

fn load_detector(cfg: &TrainConfig) -> Result<Option<DetectorParams>> {
    match cfg.detector_kind()? {
        DetectorKind::Oracle => Ok(None),
        DetectorKind::Heuristic => Ok(Some(DetectorParams::heuristic(cfg.patch_size))),
        DetectorKind::Learned => {
            if cfg.detector_path.is_empty() {
                return Err(Error::Config("learned detector needs `detector_path` (see train-detector)".into()).into());
            }
            let bytes = std::fs::read(&cfg.detector_path).with_context(|| cfg.detector_path.clone())?;
            Ok(Some(DetectorParams::from_bytes(&bytes)?))
        }
    }
}

fn read_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).with_context(|| path.display().to_string())?;
    Ok(decode_png(&bytes)?)
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_png(img)?).with_context(|| path.display().to_string())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let opts = RenderOptions {
        size: a.image_size,
        patch_size: a.patch_size,
        draw_gripper: true,
    };
    PatchGeometry::new(a.image_size, a.image_size, a.patch_size)?;
    let ds = generate_dataset(a.episodes, a.seed, &a.out, &opts)?;
    let ok = ds.episodes.iter().filter(|e| e.success).count();
    println!("episodes = {}", ds.manifest.episode_count);
    println!("frames = {}", ds.manifest.step_count);
    println!("expert_successes = {ok}");
    println!("seed = {}", a.seed);
    println!("out = {:?}", a.out.display().to_string());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = load_cfg_dataset(&cfg)?;
    let detector = load_detector(&cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let model = Model::new(&cfg, detector, fit_binning(&ds, cfg.bins)?)?;
    let data = prepare(&ds, &model)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::load_state(p, &data)?;
            if t.cfg != cfg {
                bail!(Error::Config("resumed state was trained with a different config".into()));
            }
            t
        }
        None => Trainer::new(cfg.clone(), model, &data)?,
    };
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()).context("config.toml")?;
    let remaining = cfg.steps.saturating_sub(trainer.step);
    eprintln!("config {} | {} frames | {} steps", cfg.hash(), data.len(), remaining);
    let result = trainer.run(&data, remaining, |row| {
        eprintln!("step {:>6} loss {:.4} acc {:.3}", row.step, row.loss, row.accuracy);
    });
    // Keep whatever was learned before a failure.
    trainer.save_state(&a.out.join("state.bin"))?;
    let summary = summarize(&trainer.metrics, &cfg, trainer.step)?;
    export_metrics(&trainer.metrics, &summary, &a.out)?;
    result?;
    trainer.model.save(&a.out.join("model.bin"))?;
    print!("{}", std::fs::read_to_string(a.out.join("summary.toml")).context("summary.toml")?);
    Ok(())
}

fn print_eval(r: &EvalResult) {
    println!("success_rate = {:.4}", r.success_rate());
    println!("stderr = {:.4}", r.stderr());
    println!("successes = {}", r.successes);
    println!("rollouts = {}", r.rollouts);
    for s in &r.per_seed {
        println!("seed.{} = {:.4}", s.seed, s.successes as f64 / s.rollouts.max(1) as f64);
    }
    for rel in Relation::ALL {
        println!("relation.{} = {:.4}", rel.label().replace(' ', "_"), r.relation_rate(rel));
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let result = match &a.model {
        Some(p) => {
            let model = Model::load(p)?;
            evaluate(&mut ModelController::new(&model), a.rollouts, &a.seeds, a.max_steps)?
        }
        None => {
            let mut c: Box<dyn Controller> = match a.controller.as_str() {
                "expert" => Box::new(ExpertController),
                "random" => Box::new(RandomController::new()),
                other => bail!(Error::Parameter(format!("unknown controller {other:?}"))),
            };
            evaluate(c.as_mut(), a.rollouts, &a.seeds, a.max_steps)?
        }
    };
    print_eval(&result);
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let geom = PatchGeometry::new(a.image_size, a.image_size, a.patch_size)?;
    let policy = PolicyConfig {
        layers: a.layers,
        width: a.width,
        heads: a.heads,
        mlp_ratio: 4,
        visual_dim: 64,
        max_len: 0,
        seed: 0,
    };
    let cfg = oat_core::train::BenchConfig {
        prefix_len: a.prefix_len,
        batch: a.batch,
        reps: a.reps,
        ..oat_core::train::BenchConfig::new(policy)
    };
    let mut entries: Vec<(String, usize)> = TokenizerMode::ALL
        .iter()
        .map(|&m| {
            let t = TokenizerConfig::with_mode(m);
            (tokenizer_label(&t), t.token_count(geom.k()))
        })
        .collect();
    entries.extend(a.tokens.iter().map(|&t| (format!("T={t}"), t)));
    let rows = bench_token_counts(&cfg, &entries)?;
    let table = throughput_table(&rows);
    print!("{table}");
    if let (Some(full), Some(oat)) = (
        rows.iter().find(|r| r.label == "full-patch"),
        rows.iter().find(|r| r.label == "oat"),
    ) {
        println!(
            "full-patch/oat measured = {:.2}, attention = {:.2}, analytic = {:.2}",
            full.seconds_per_example / oat.seconds_per_example,
            full.attention_seconds / oat.attention_seconds,
            analytic_ratio(a.prefix_len, full.visual_tokens, oat.visual_tokens)
        );
    }
    if let Some(p) = &a.out {
        std::fs::write(p, table).with_context(|| p.display().to_string())?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = load_cfg_dataset(&cfg)?;
    let detector = load_detector(&cfg)?;
    let mut variants = token_variants();
    if a.sizes {
        variants.extend(size_variants());
    }
    let table = run_ablation_suite(&cfg, &variants, &a.seeds, &ds, detector.as_ref(), |name, seed, rate| {
        eprintln!("{name} seed {seed}: success {:.3}", rate);
    })?;
    print!("{}", table.to_markdown());
    let chain = ["oat (average pool)", "oat (attention pool)", "object-only", "single-token"];
    let violations = table.ordering_violations(&chain, 0.03)?;
    if violations.is_empty() {
        println!("ordering holds within 3 points");
    }
    for (hi, lo, x, y) in &violations {
        println!("ORDERING DEVIATION: {hi} {:.1}% < {lo} {:.1}%", 100.0 * x, 100.0 * y);
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
        std::fs::write(dir.join("ablation.md"), table.to_markdown()).context("ablation.md")?;
        std::fs::write(dir.join("ablation.csv"), table.to_csv()).context("ablation.csv")?;
    }
    Ok(())
}

fn tokenize(a: TokenizeArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let ds = load_cfg_dataset(&cfg)?;
    let ep = ds
        .episodes
        .get(a.episode)
        .ok_or_else(|| Error::Data(format!("episode {} of {}", a.episode, ds.episodes.len())))?;
    let st = ep
        .steps
        .get(a.step)
        .ok_or_else(|| Error::Data(format!("step {} of {}", a.step, ep.steps.len())))?;
    let model = Model::new(&cfg, load_detector(&cfg)?, fit_binning(&ds, cfg.bins)?)?;
    let img = st.image(cfg.image_size);
    let (masks, kp) = model.perceive(&img, &st.masks, st.keypoint)?;
    let toks = model.visual_tokens(&img, &masks, &kp)?;
    let geom = model.geometry();
    let mut s = String::new();
    writeln!(s, "instruction = {:?}", ep.instruction.to_string())?;
    writeln!(s, "mode = {:?}", cfg.mode)?;
    writeln!(s, "patches = {}", geom.k())?;
    writeln!(s, "visual_tokens = {}", toks.len())?;
    writeln!(s, "reduction_ratio = {}", reduction_ratio(&model.tokenizer, &geom))?;
    match kp.point {
        Some(p) => writeln!(s, "keypoint = [{:.2}, {:.2}]", p.u, p.v)?,
        None => writeln!(s, "keypoint = \"none\"")?,
    }
    writeln!(s, "\nindex,source,detail,norm")?;
    for (i, prov) in toks.provenance.iter().enumerate() {
        let norm = toks.token(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        let (src, detail) = match *prov {
            Provenance::Slot { slot, empty } => (
                "slot",
                format!("slot {slot} ({} patches{})", masks.counts()[slot], if empty { ", empty" } else { "" }),
            ),
            Provenance::Agent { cell, patch: Some(k) } => ("agent", format!("cell {cell} <- patch {k}")),
            Provenance::Agent { cell, patch: None } => ("agent", format!("cell {cell} <- global mean")),
            Provenance::Patch(k) => ("patch", format!("patch {k}")),
            Provenance::Global => ("global", "mean of all patches".to_string()),
        };
        writeln!(s, "{i},{src},{detail},{norm:.4}")?;
    }
    print!("{s}");
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let img = read_png(&a.image)?;
    let geom = PatchGeometry::new(img.height(), img.width(), a.patch_size)?;
    let masks = segment_unsupervised(&img, &geom, a.n_slots)?;
    write_png(&a.out, &overlay_masks(&img, &geom, &masks)?)?;
    println!("slots = {}", masks.n_slots());
    println!("non_empty = {}", masks.non_empty());
    println!("counts = {:?}", masks.counts());
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let img = read_png(&a.image)?;
    let det = match &a.detector {
        Some(p) => DetectorParams::from_bytes(&std::fs::read(p).with_context(|| p.display().to_string())?)?,
        None => DetectorParams::heuristic(a.patch_size),
    };
    let pred = det.detect(&img);
    write_png(&a.out, &overlay_keypoint(&img, &pred))?;
    match pred.point {
        Some(p) => println!("keypoint = [{:.2}, {:.2}]", p.u, p.v),
        None => println!("keypoint = \"none\""),
    }
    println!("confidence = {:.4}", pred.confidence);
    Ok(())
}

fn print_detector_metrics(m: &DetectorMetrics) {
    println!("holdout_frames = {}", m.frames);
    println!("holdout_positives = {}", m.positives);
    println!("median_error_px = {:.3}", m.median_error);
    println!("hit_rate = {:.4}", m.hit_rate);
    println!("miss_rate = {:.4}", m.miss_rate);
    println!("false_positive_rate = {:.4}", m.false_positive_rate);
}

fn train_detector_cmd(a: TrainDetectorArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let opts = RenderOptions {
        size: ds.manifest.image_size,
        patch_size: ds.manifest.patch_size,
        draw_gripper: true,
    };
    let train = samples_from_states(ds.frames().map(|(_, s)| &s.state), &opts, a.negative_every)?;
    let mut holdout = Vec::new();
    if a.holdout > 0 {
        let mut eps = Vec::new();
        let mut frames = 0;
        let mut batch_seed = ds.manifest.seed.wrapping_add(0x4855_4C44);
        while frames < a.holdout {
            let more = generate_episodes(16, batch_seed, &opts)?;
            frames += more.iter().map(|e| e.steps.len()).sum::<usize>();
            eps.extend(more);
            batch_seed = batch_seed.wrapping_add(1);
        }
        let states = eps.iter().flat_map(|e| e.steps.iter().map(|s| &s.state)).take(a.holdout);
        holdout = samples_from_states(states, &opts, a.negative_every)?;
    }
    let cfg = DetectorTrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
    };
    let t = std::time::Instant::now();
    let report = train_detector(&train, &holdout, opts.size, opts.patch_size, &cfg)?;
    std::fs::write(&a.out, report.params.to_bytes()).with_context(|| a.out.display().to_string())?;
    println!("train_frames = {}", train.len());
    println!("steps = {}", a.steps);
    println!("final_loss = {:.5}", report.losses.last().copied().unwrap_or(f64::NAN));
    println!("seconds = {:.1}", t.elapsed().as_secs_f64());
    if let Some(m) = &report.holdout {
        print_detector_metrics(m);
    }
    Ok(())
}
