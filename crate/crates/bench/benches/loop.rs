use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use guardian_core::audit::verify_chain;
use guardian_core::simulator::{run_scenario, Scenario, SimConfig};
use guardian_core::verifier::{explore, ExploreConfig};

fn scenarios(c: &mut Criterion) {
    let mut group = c.benchmark_group("scenario");
    for scenario in [Scenario::A, Scenario::B, Scenario::C, Scenario::None] {
        group.bench_with_input(BenchmarkId::from_parameter(scenario), &scenario, |b, &s| {
            b.iter(|| run_scenario(SimConfig::scenario(s, 3, 42)).unwrap())
        });
    }
    group.bench_function("random-5-nodes", |b| {
        let config = (0..)
            .map(SimConfig::random)
            .find(|c| c.n_nodes == 5)
            .unwrap();
        b.iter(|| run_scenario(config.clone()).unwrap())
    });
    group.finish();
}

fn ledger(c: &mut Criterion) {
    let bytes = run_scenario(SimConfig::scenario(Scenario::A, 5, 42))
        .unwrap()
        .ledger
        .to_file_bytes();
    c.bench_function("verify-chain/scenario-a-5", |b| {
        b.iter(|| verify_chain(black_box(&bytes)).unwrap())
    });
}

fn model_check(c: &mut Criterion) {
    let mut group = c.benchmark_group("explore");
    group.sample_size(10);
    group.bench_function("1-node-budget-2", |b| {
        b.iter(|| explore(&ExploreConfig::new(1, 60, 2)))
    });
    group.bench_function("2-nodes-budget-1", |b| {
        b.iter(|| explore(&ExploreConfig::new(2, 60, 1)))
    });
    group.finish();
}

criterion_group!(benches, scenarios, ledger, model_check);
criterion_main!(benches);
