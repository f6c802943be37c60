use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use modelpar::comm::ClusterShape;
use modelpar::exec::{self, ExecPolicy};
use modelpar::model_graph::{build_node_tree, compute_costs, ModelSpec};
use modelpar::partition::partition_tree;
use modelpar::pipeline::{simulate, Pipeline, SchedulePolicy, SimConfig};
use modelpar::synth::random_model;
use modelpar::tensor_parallel::oracle::{run_suite, OracleConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const POLICIES: [(&str, ExecPolicy); 2] = [
    ("sequential", ExecPolicy::Sequential),
    ("parallel", ExecPolicy::Parallel),
];

fn oracle_suite(c: &mut Criterion) {
    let cfg = OracleConfig {
        cases: 10,
        grad_cases: 4,
        ..OracleConfig::default()
    };
    let mut group = c.benchmark_group("tp_oracle_suite");
    group.sample_size(10);
    for (name, policy) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &policy, |b, &p| {
            b.iter(|| black_box(run_suite(&cfg, p).unwrap()))
        });
    }
    group.finish();
}

fn models(count: usize) -> Vec<(ModelSpec, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..count)
        .map(|i| (random_model(&mut rng, 120), 1 + i % 4))
        .collect()
}

fn simulate_one(spec: &ModelSpec, degree: usize) -> f64 {
    let tree = build_node_tree(spec);
    let costed = compute_costs(&tree, spec, 0.5).unwrap();
    let owner = partition_tree(&costed, degree)
        .unwrap()
        .module_partitions(&tree, spec.len());
    let pipe = Pipeline::with_owners(spec, owner, degree, ClusterShape::default()).unwrap();
    let cfg = SimConfig {
        microbatches: 8,
        policy: SchedulePolicy::Interleaved,
        static_mode: true,
        steps: 6,
        ..SimConfig::default()
    };
    simulate(&pipe, &cfg).unwrap().steps.last().unwrap().makespan
}

fn simulation_sweep(c: &mut Criterion) {
    let cases = models(32);
    let mut group = c.benchmark_group("simulation_sweep");
    group.sample_size(10);
    for (name, policy) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &policy, |b, &p| {
            b.iter(|| black_box(exec::map(p, &cases, |(spec, d)| simulate_one(spec, *d))))
        });
    }
    group.finish();
}

fn partition_sweep(c: &mut Criterion) {
    let cases = models(64);
    let mut group = c.benchmark_group("partition_sweep");
    for (name, policy) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &policy, |b, &p| {
            b.iter(|| {
                black_box(exec::map(p, &cases, |(spec, d)| {
                    let tree = build_node_tree(spec);
                    let costed = compute_costs(&tree, spec, 0.5).unwrap();
                    partition_tree(&costed, 2 * d).unwrap()
                }))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, oracle_suite, simulation_sweep, partition_sweep);
criterion_main!(benches);
