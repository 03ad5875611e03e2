use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use warpflow_bench::{cosh_torus, random_state, sinh_sphere};
use warpflow_core::audit::audit_state;
use warpflow_core::flow::step;
use warpflow_core::geometry::compute;
use warpflow_core::{Chart, FlowConfig, FlowType, Integrator};

fn geometry(c: &mut Criterion) {
    let space = cosh_torus();
    let mut group = c.benchmark_group("geometry/torus");
    for n in [32, 64, 128] {
        let state = random_state(&space, Chart::Torus2d, n, 7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &state, |b, s| {
            b.iter(|| compute(s.grid(), &space, black_box(s.u())).unwrap())
        });
    }
    group.finish();
}

fn steps(c: &mut Criterion) {
    let space = cosh_torus();
    let state = random_state(&space, Chart::Torus2d, 64, 7);
    let mut group = c.benchmark_group("step/torus64");
    for ft in [FlowType::LocallyConstrained, FlowType::GuanLi] {
        let config = FlowConfig::new(ft);
        group.bench_function(ft.name(), |b| b.iter(|| step(black_box(&state), &config, &space).unwrap()));
    }
    let mut rkc = FlowConfig::new(FlowType::LocallyConstrained);
    rkc.integrator = Integrator::Rkc { max_dt: 0.2 };
    group.bench_function("lcf-h2h1-rkc", |b| b.iter(|| step(black_box(&state), &rkc, &space).unwrap()));
    group.finish();

    let space = sinh_sphere();
    let state = random_state(&space, Chart::AxisymSphere, 512, 7);
    let config = FlowConfig::new(FlowType::InverseMean);
    c.bench_function("step/sphere512/imcf", |b| b.iter(|| step(black_box(&state), &config, &space).unwrap()));
}

fn audit(c: &mut Criterion) {
    let space = sinh_sphere();
    let state = random_state(&space, Chart::AxisymSphere, 512, 7);
    c.bench_function("audit_state/sphere512", |b| b.iter(|| audit_state(&space, black_box(&state))));
}

criterion_group!(benches, geometry, steps, audit);
criterion_main!(benches);
