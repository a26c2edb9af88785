use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use gap_core::metaloop::{batch_meta_gradient, MetaGradMode, MetaState, Trainer, TrainConfig};
use gap_core::par::Executor;
use gap_core::preconditioners::{LayerSelection, PrecondKind};
use gap_core::tasks::{evaluate_protocol, EvalSettings};
use gap_core::theory::{check_variance_lemma, cosine_decay_sweep};

fn executors() -> [(&'static str, Executor); 2] {
    [("sequential", Executor::new(1)), ("parallel", Executor::new(0))]
}

fn bench_meta_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_meta_gradient");
    group.sample_size(20);
    for kind in [PrecondKind::Identity, PrecondKind::Gap] {
        let config = TrainConfig { batch_size: 8, ..TrainConfig::sinusoid(kind, 5) };
        let state = MetaState::init(&config.layer_sizes, kind, LayerSelection::Hidden, 0).unwrap();
        let batch = Trainer::sample_batch(&config, 0).unwrap();
        for (name, exec) in executors() {
            group.bench_with_input(BenchmarkId::new(name, kind.key()), &batch, |b, batch| {
                b.iter(|| {
                    batch_meta_gradient(&state, black_box(batch), config.alpha, config.k_train, MetaGradMode::FactorFrozen, &exec)
                        .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate_protocol");
    group.sample_size(10);
    let state = MetaState::init(&[1, 40, 40, 1], PrecondKind::Gap, LayerSelection::Hidden, 0).unwrap();
    let settings = EvalSettings { n_tasks: 64, shots: 5, query_size: 100, alpha: 0.01, k_steps: 10, seed: 2024 };
    for (name, exec) in executors() {
        group.bench_function(name, |b| b.iter(|| evaluate_protocol(&state, black_box(&settings), None, &exec).unwrap()));
    }
    group.finish();
}

fn bench_theory(c: &mut Criterion) {
    let mut group = c.benchmark_group("theory");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::new("variance_lemma", name), |b| {
            b.iter(|| check_variance_lemma(black_box(100), 10_000, 0, &exec).unwrap())
        });
        group.bench_function(BenchmarkId::new("cosine_sweep", name), |b| {
            b.iter(|| cosine_decay_sweep(8, black_box(&[64, 256, 1024]), 50, 0, &exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_meta_gradient, bench_evaluation, bench_theory);
criterion_main!(benches);
