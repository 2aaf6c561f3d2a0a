use std::hint::black_box;

use contbcf::par::Execution;
use contbcf::sampler::{run_chains_with, ModelInputs, SamplerConfig};
use contbcf::simulation::{generate_synthetic, to_panel, SimulationScenario};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn chains(c: &mut Criterion) {
    let mut s = SimulationScenario::quadratic_case(2, 1).unwrap();
    s.n = 500;
    let inputs = ModelInputs::from_panel(&to_panel(&generate_synthetic(&s).unwrap())).unwrap();
    let mut cfg = SamplerConfig::desk(4, 1);
    cfg.burn_in = 20;
    cfg.kept_draws = 20;

    let mut group = c.benchmark_group("run_chains");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_with_input(BenchmarkId::new(name, "4x40_n500"), &exec, |b, &exec| {
            b.iter(|| black_box(run_chains_with(&inputs, &cfg, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, chains);
criterion_main!(benches);
