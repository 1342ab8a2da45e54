use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::Vector3;
use spreadqp::control::{ante_qp, intermediate_qp, post_qp};
use spreadqp::contact::impact_map;
use spreadqp::experiment::simulate;
use spreadqp::sim::{step_free, ModelKind};
use spreadqp::{ActiveSet, QpSolver, SimConfig, Strategy};
use spreadqp_bench::{box_qp, Fixture};

fn qp(c: &mut Criterion) {
    let problem = box_qp(7, 4);
    c.bench_function("qp/cold_7x4", |b| b.iter(|| spreadqp::qp::solve(black_box(&problem)).unwrap()));
    let mut solver = QpSolver::new();
    c.bench_function("qp/warm_7x4", |b| b.iter(|| solver.solve(black_box(&problem)).unwrap()));
}

fn control_laws(c: &mut Criterion) {
    let fx = Fixture::new();
    c.bench_function("control/ante", |b| b.iter(|| ante_qp(&fx.params, black_box(&fx.approach), &fx.refs, fx.approach_t).unwrap()));
    c.bench_function("control/intermediate", |b| {
        b.iter(|| intermediate_qp(&fx.params, black_box(&fx.approach.q), &fx.refs, fx.approach_t).unwrap())
    });
    c.bench_function("control/post", |b| b.iter(|| post_qp(&fx.params, black_box(&fx.pressed), &fx.refs, fx.pressed_t).unwrap()));
}

fn dynamics(c: &mut Criterion) {
    let fx = Fixture::new();
    c.bench_function("impact/both_contacts", |b| b.iter(|| impact_map(&fx.params, black_box(&fx.approach), ActiveSet::BOTH).unwrap()));
    let tau = Vector3::new(20.0, 25.0, 5.0);
    c.bench_function("sim/step_free", |b| b.iter(|| step_free(&fx.params, black_box(&fx.approach), &tau, 1e-4).unwrap()));
}

fn full_run(c: &mut Criterion) {
    let fx = Fixture::new();
    let mut group = c.benchmark_group("sim");
    group.sample_size(10);
    group.bench_function("rigid_run", |b| {
        b.iter(|| simulate(ModelKind::Rigid, &fx.params, &SimConfig::default(), &fx.refs, Strategy::RsIntermediate).unwrap())
    });
    group.finish();
}

criterion_group!(benches, qp, control_laws, dynamics, full_run);
criterion_main!(benches);
