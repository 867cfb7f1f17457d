use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dreamstate::analysis::{tsne_project_with, TsneParams};
use dreamstate::diffusion::{dit_forward, DiT, DiTConfig};
use dreamstate::rng::{normal_vec, seeded};
use dreamstate::rwkv::{forward, wkv_step, RwkvConfig, RwkvWeights, WkvState};
use dreamstate_bench::{clustered_points, random_signals};

fn wkv(c: &mut Criterion) {
    let mut group = c.benchmark_group("wkv_step");
    for head_dim in [8, 16, 64] {
        let sig = random_signals(4, head_dim, &mut seeded(1));
        let state = WkvState::zeros(4, head_dim, 0);
        group.bench_with_input(BenchmarkId::from_parameter(head_dim), &head_dim, |b, _| {
            b.iter(|| wkv_step(black_box(&state), black_box(&sig)).unwrap())
        });
    }
    group.finish();
}

fn lm_forward(c: &mut Criterion) {
    let cfg = RwkvConfig {
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        ..RwkvConfig::default()
    };
    let w = RwkvWeights::init(&cfg, &mut seeded(2)).unwrap();
    let tokens: Vec<usize> = b"I want you to act as a linux terminal"
        .iter()
        .map(|&b| usize::from(b))
        .collect();
    c.bench_function("lm_forward_38_tokens", |b| {
        b.iter(|| forward(&cfg, &w, black_box(&tokens)).unwrap())
    });
}

fn dit(c: &mut Criterion) {
    let cfg = DiTConfig {
        patch_size: 8,
        depth: 2,
        width: 64,
        n_heads: 2,
        cond_dim: 16,
        input_len: 128,
    };
    let model = DiT::new(cfg.clone(), &mut seeded(3)).unwrap();
    let x = normal_vec(cfg.input_len, &mut seeded(4));
    let cond = normal_vec(cfg.cond_dim, &mut seeded(5));
    c.bench_function("dit_forward_toy", |b| {
        b.iter(|| dit_forward(&cfg, &model.weights, black_box(&x), 100, black_box(&cond)).unwrap())
    });
}

fn tsne(c: &mut Criterion) {
    let points = clustered_points(120, 128, 3, &mut seeded(6));
    let params = TsneParams {
        iterations: 100,
        ..TsneParams::default()
    };
    let mut group = c.benchmark_group("tsne");
    group.sample_size(10);
    group.bench_function("120x128_100_iterations", |b| {
        b.iter(|| tsne_project_with(black_box(&points), params, |_, _| {}).unwrap())
    });
    group.finish();
}

criterion_group!(benches, wkv, lm_forward, dit, tsne);
criterion_main!(benches);
