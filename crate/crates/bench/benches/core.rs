use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use rfmsteer::rfm::{compute_agop, rfm_train};
use rfmsteer::steering::Schedule;
use rfmsteer::{
    generate, kernel_matrix, ChannelMode, FrozenModel, KernelParams, KrrModel, LayerWeightScheme,
    ModelConfig, PlanEntry, RecordOptions, RfmConfig, Split, SteeringDirection, SteeringPlan, Targets,
};

fn data(n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |i, j| ((i * 31 + j * 17) % 97) as f64 / 97.0 - 0.5)
}

fn kernels(c: &mut Criterion) {
    let x = data(500, 64);
    let laplace = KernelParams::laplace(10.0);
    let general = KernelParams::new(1.5, 1.1, 10.0).unwrap();
    c.bench_function("kernel_matrix 500x500 p=2", |b| {
        b.iter(|| kernel_matrix(black_box(&x), black_box(&x), &laplace).unwrap())
    });
    c.bench_function("kernel_matrix 500x500 p=1.5", |b| {
        b.iter(|| kernel_matrix(black_box(&x), black_box(&x), &general).unwrap())
    });
    let y = DMatrix::from_fn(500, 1, |i, _| (i % 2) as f64);
    c.bench_function("krr_fit n=500", |b| {
        b.iter(|| KrrModel::fit(black_box(&x), black_box(&y), laplace, 1e-3).unwrap())
    });
    let model = KrrModel::fit(&x, &y, laplace, 1e-3).unwrap();
    c.bench_function("krr_gradients + agop n=500", |b| {
        b.iter(|| {
            let g = model.input_gradients(black_box(&x), ChannelMode::PerChannel).unwrap();
            compute_agop(&g, false).unwrap()
        })
    });
}

fn rfm(c: &mut Criterion) {
    let x = data(300, 64);
    let targets = Targets::Binary((0..300).map(|i| x[(i, 0)] > 0.0).collect());
    let split = Split::shuffled(300, 1);
    let config = RfmConfig {
        iterations: 3,
        ..Default::default()
    };
    c.bench_function("rfm_train n=300 3 iterations", |b| {
        b.iter(|| rfm_train(black_box(&x), &targets, &split, &config).unwrap())
    });
}

fn generation(c: &mut Criterion) {
    let model = FrozenModel::build(ModelConfig::default(), 7).unwrap();
    let mut v = nalgebra::DVector::zeros(model.hidden());
    v[0] = 1.0;
    let dirs: Vec<SteeringDirection> = (0..model.layers())
        .map(|layer| SteeringDirection {
            layer,
            vector: v.clone(),
            eigenvalue: 1.0,
            sign: 1,
            label: "bench".into(),
        })
        .collect();
    let entry = PlanEntry::new(
        "bench",
        dirs,
        0.45,
        Schedule::constant(),
        LayerWeightScheme::uniform(1.0, model.layers()),
    )
    .unwrap();
    let plan = SteeringPlan::new(vec![entry], 0.3, 3).unwrap();
    c.bench_function("generate 256 steps unsteered", |b| {
        b.iter(|| generate(&model, &[1], 256, 5, None, &RecordOptions::default()).unwrap())
    });
    c.bench_function("generate 256 steps steered", |b| {
        b.iter(|| generate(&model, &[1], 256, 5, Some(&plan), &RecordOptions::default()).unwrap())
    });
}

criterion_group!(benches, kernels, rfm, generation);
criterion_main!(benches);
