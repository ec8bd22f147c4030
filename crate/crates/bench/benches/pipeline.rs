use std::hint::black_box;

use ahcnn_bench::resnet_fixture;
use ahcnn_core::reconfig_sim::zynq_reference_costs;
use ahcnn_core::{run_batch, simulate_batch, GateConfig, RunConfig, SimMode, SimOptions};
use criterion::{criterion_group, criterion_main, Criterion};

fn cascade(c: &mut Criterion) {
    let (model, images, _) = resnet_fixture(16, 3);
    let mut group = c.benchmark_group("run_batch");
    group.sample_size(10);
    for gamma in [0.0, 0.3, 1.0] {
        let cfg = RunConfig {
            gate: GateConfig::confidence(gamma),
            batch_size: 16,
            ..RunConfig::default()
        };
        group.bench_function(format!("resnet16 gamma={gamma}"), |b| {
            b.iter(|| run_batch(black_box(&model), black_box(&images), None, &cfg).unwrap())
        });
    }
    group.finish();
}

fn simulator(c: &mut Criterion) {
    let costs = zynq_reference_costs();
    c.bench_function("simulate_batch 512", |b| {
        b.iter(|| {
            simulate_batch(&costs, black_box(&[512, 256, 128]), 512, SimMode::Fpga, SimOptions::default())
                .unwrap()
        })
    });
}

criterion_group!(benches, cascade, simulator);
criterion_main!(benches);
