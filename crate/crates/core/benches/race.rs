use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use xchainlab::simlab::{estimate, estimate_sequential, RaceConfig, RaceModel};

fn race(c: &mut Criterion) {
    let mut group = c.benchmark_group("race");
    group.sample_size(10);
    for &(n, l) in &[(2u64, 8u64), (2048, 8)] {
        let cfg = RaceConfig { producer_nodes: n, segment_length: l, trials: 100_000, master_seed: 1, ..Default::default() };
        for model in [RaceModel::Cheat, RaceModel::Rebranch] {
            let id = format!("{}/n{n}/L{l}", model.name());
            group.bench_with_input(BenchmarkId::new("sequential", &id), &cfg, |b, cfg| {
                b.iter(|| estimate_sequential(model, black_box(cfg)))
            });
            group.bench_with_input(BenchmarkId::new("parallel", &id), &cfg, |b, cfg| {
                b.iter(|| estimate(model, black_box(cfg)))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, race);
criterion_main!(benches);
