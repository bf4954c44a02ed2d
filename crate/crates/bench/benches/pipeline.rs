use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vli_bench::Fixture;
use vli_core::attention::{extract_anchor_mask, Heatmap};
use vli_core::numerics::{js_divergence, TokenDistribution};
use vli_core::synthetic::run_pope_like_bench;
use vli_core::vli_decode_step;

fn kernels(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut dist = |n: usize| {
        let v: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let s: f64 = v.iter().sum();
        TokenDistribution::new(v.iter().map(|x| x / s).collect()).unwrap()
    };
    let (p, q) = (dist(64), dist(64));
    c.bench_function("js_divergence/64", |b| {
        b.iter(|| js_divergence(black_box(&p), black_box(&q)))
    });
    let heat = Heatmap::normalized((0..256).map(|i| ((i * 37) % 101) as f64).collect()).unwrap();
    c.bench_function("anchor_mask/256", |b| {
        b.iter(|| extract_anchor_mask(black_box(&heat), 0.4))
    });
}

fn model_passes(c: &mut Criterion) {
    let fx = Fixture::new();
    let model = &fx.pipeline.model;
    let case = fx.triggered_case();
    let prompt = case.prompt();
    let visual = model.encode_visual(&case.image).unwrap();
    let prefix = model.visual_prefix(&visual).unwrap();
    c.bench_function("visual_prefix", |b| {
        b.iter(|| model.visual_prefix(black_box(&visual)))
    });
    c.bench_function("forward_with_prefix", |b| {
        b.iter(|| model.forward_with_prefix(black_box(&prefix), &prompt, None))
    });
    c.bench_function("forward_step", |b| {
        b.iter(|| model.forward_step(black_box(&visual), &prompt, None))
    });
    c.bench_function("vli_decode_step/triggered", |b| {
        b.iter(|| {
            vli_decode_step(
                model,
                black_box(&case.image),
                &prompt,
                &fx.experts,
                &fx.config,
            )
        })
    });
}

fn benchmark_suite(c: &mut Criterion) {
    let fx = Fixture::new();
    let mut g = c.benchmark_group("pope_like");
    g.sample_size(10);
    g.bench_function("20_cases", |b| {
        b.iter(|| run_pope_like_bench(&fx.pipeline.model, &fx.experts, &fx.config, 20, 42))
    });
    g.finish();
}

criterion_group!(benches, kernels, model_passes, benchmark_suite);
criterion_main!(benches);
