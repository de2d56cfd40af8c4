use criterion::{criterion_group, criterion_main, Criterion};
use diam::inference::run_diam;
use diam::SolverConfig;
use diam_bench::{episode, start};

fn solver(c: &mut Criterion) {
    let ep = episode(64, 0);
    let config = SolverConfig::default();
    let mut group = c.benchmark_group("solver");
    group.sample_size(10);
    group.bench_function("run_diam/d64", |b| {
        b.iter_batched(
            || start(&ep),
            |state| run_diam(&ep.task, state, &config).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, solver);
criterion_main!(benches);
