use std::hint::black_box;

use boundmap_core::attacks::{deepfool, dykstra_project, AttackConfig};
use boundmap_core::datasets::gen_t1;
use boundmap_core::margins::t1_probe_sequence;
use boundmap_core::models::train_sgd;
use boundmap_core::subspace::{diagonal_subspaces, Spectral};
use boundmap_core::{ImageShape, LrSchedule, Model, T1Params, TrainConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array1;

fn t1(n: usize) -> boundmap_core::LabeledDataset {
    gen_t1(T1Params { epsilon: 5.0, sigma: 1.0, n_samples: n, dim: 100, seed: 1 }).unwrap()
}

fn bench_deepfool(c: &mut Criterion) {
    let ds = t1(10);
    let model = Model::mlp(&[100, 200, 200, 200, 200, 1], 3).unwrap();
    let seq = t1_probe_sequence(ds.rotation.as_ref().unwrap(), 3, 2).unwrap();
    let cfg = AttackConfig::default();
    let x = ds.features.row(0);
    c.bench_function("deepfool_mlp4x200_full_space", |b| b.iter(|| deepfool(&model, black_box(x), None, &cfg)));
    c.bench_function("deepfool_mlp4x200_s_orth", |b| b.iter(|| deepfool(&model, black_box(x), Some(&seq.items[2]), &cfg)));
}

fn bench_spectral(c: &mut Criterion) {
    let shape = ImageShape::new(1, 28, 28);
    let sp = Spectral::new(shape);
    let img = Array1::from_shape_fn(shape.len(), |i| (i % 17) as f64 / 17.0);
    c.bench_function("flip_28x28", |b| b.iter(|| sp.flip(black_box(img.view()))));
    c.bench_function("diagonal_subspaces_28x28_k8", |b| b.iter(|| diagonal_subspaces(black_box(shape), 8, 1)));

    let small = ImageShape::new(1, 8, 8);
    let sp = Spectral::new(small);
    let reference = sp.flip(Array1::from_elem(64, 0.5).view()).unwrap();
    let input = &reference + &Array1::from_shape_fn(64, |i| ((i * 7) % 11) as f64 / 5.0 - 1.0);
    c.bench_function("dykstra_8x8_5_rounds", |b| b.iter(|| dykstra_project(black_box(input.view()), reference.view(), 0.5, 5, small)));
}

fn bench_training(c: &mut Criterion) {
    let ds = t1(1000);
    let cfg = TrainConfig { epochs: 1, batch_size: 128, max_lr: 0.1, lr_schedule: LrSchedule::LinearDecay, momentum: 0.0, weight_decay: 0.0, seed: 0 };
    let model = Model::mlp(&[100, 200, 200, 200, 200, 1], 3).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("epoch_mlp4x200_n1000", |b| b.iter(|| train_sgd(model.clone(), &ds, None, &cfg)));
    group.finish();
}

criterion_group!(benches, bench_deepfool, bench_spectral, bench_training);
criterion_main!(benches);
