use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use oat_core::encoder::{EncoderConfig, EncoderMode, FeatureEncoder};
use oat_core::scene::{render, sample_task};
use oat_core::segment::segment_unsupervised;
use oat_core::tokenizer::{tokenize, AttentionPool, PoolMode, TokenizerConfig, TokenizerMode};
use oat_core::{DetectorParams, PatchGeometry};

fn bench_tokenize(c: &mut Criterion) {
    let (state, _) = sample_task(3);
    let r = render(&state).unwrap();
    let geom = PatchGeometry::new(r.image.height(), r.image.width(), 14).unwrap();
    let enc = FeatureEncoder::new(EncoderConfig::new(EncoderMode::ConvTrained, geom)).unwrap();
    let feats = enc.encode(&r.image).unwrap();
    let det = DetectorParams::heuristic(14);
    let kp = det.detect(&r.image);
    let masks = segment_unsupervised(&r.image, &geom, 7).unwrap();

    let mut g = c.benchmark_group("perception");
    g.bench_function("encode", |b| b.iter(|| enc.encode(black_box(&r.image)).unwrap()));
    g.bench_function("segment", |b| b.iter(|| segment_unsupervised(black_box(&r.image), &geom, 7).unwrap()));
    g.bench_function("detect-heuristic", |b| b.iter(|| det.detect(black_box(&r.image))));
    g.finish();

    let mut g = c.benchmark_group("tokenize");
    for mode in TokenizerMode::ALL {
        for pool_mode in [PoolMode::Average, PoolMode::Attention] {
            let cfg = TokenizerConfig {
                pool: pool_mode,
                ..TokenizerConfig::with_mode(mode)
            };
            if pool_mode == PoolMode::Attention && cfg.pool_queries().is_none() {
                continue;
            }
            let pool = AttentionPool::for_config(&cfg, 0);
            let id = BenchmarkId::new(mode.name(), pool_mode.name());
            g.bench_with_input(id, &cfg, |b, cfg| b.iter(|| tokenize(black_box(&feats), &masks, &kp, cfg, pool.as_ref()).unwrap()));
        }
    }
    g.finish();
}

criterion_group!(benches, bench_tokenize);
criterion_main!(benches);
