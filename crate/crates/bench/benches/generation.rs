use std::hint::black_box;

use candle_core::{Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use disc_core::classifier::{train_joint_dep, TrainConfig};
use disc_core::datasets::make_toy_dataset;
use disc_core::metrics::concentration;
use disc_core::objectives::{ObjectiveContext, ObjectiveSpec, TargetSpec};
use disc_core::priors::{tv_norm, GeneratorState, InrConfig, PriorConfig, PriorKind};

fn regularizers(c: &mut Criterion) {
    let img = Tensor::rand(0f32, 1f32, (3, 96, 96), &Device::Cpu).unwrap();
    let other = Tensor::rand(0f32, 1f32, (3, 96, 96), &Device::Cpu).unwrap();
    c.bench_function("tv_norm 3x96x96", |b| b.iter(|| tv_norm(black_box(&img)).unwrap()));
    c.bench_function("concentration 3x96x96", |b| {
        b.iter(|| concentration(black_box(&img), black_box(&other), 0.05).unwrap())
    });
}

fn priors(c: &mut Criterion) {
    let q = make_toy_dataset(1, 16, 0).unwrap().image(0).unwrap();
    for kind in [PriorKind::Inr, PriorKind::Dip] {
        let cfg = PriorConfig { kind, inr: InrConfig { freq_variance: 3.0, ..InrConfig::default() }, ..PriorConfig::default() };
        let state = GeneratorState::build(&cfg, &q, 0).unwrap();
        c.bench_function(&format!("{kind} render+backward 16px"), |b| {
            b.iter(|| state.render().unwrap().sum_all().unwrap().backward().unwrap())
        });
    }
}

fn objective(c: &mut Criterion) {
    let data = make_toy_dataset(20, 16, 1).unwrap();
    let bundle = train_joint_dep(&data, &TrainConfig { epochs: 1, min_steps: 20, ..TrainConfig::default() }).unwrap();
    let q = data.image(0).unwrap();
    let spec = ObjectiveSpec::default();
    let ctx = ObjectiveContext::new(&bundle, &spec, TargetSpec::flip(0, 1), &q, false).unwrap();
    let xbar = (&q * 0.9).unwrap();
    c.bench_function("LSO+DEP objective 16px", |b| b.iter(|| ctx.evaluate(black_box(&xbar)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = regularizers, priors, objective
}
criterion_main!(benches);
