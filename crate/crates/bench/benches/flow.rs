use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nvp_bench::{small_image_config, sprite_batch};
use nvp_core::datapipe::{Toy2D, Toy2DKind};
use nvp_core::trainer::{TrainConfig, TrainData, Trainer};
use nvp_core::{FlowModel, ModelConfig, Tape, Tensor};

fn conv(c: &mut Criterion) {
    let x = Tensor::from_fn(&[16, 8, 8, 8], |i| (i as f64 * 0.37).sin());
    let k = Tensor::from_fn(&[3, 3, 8, 8], |i| (i as f64 * 0.11).cos());
    c.bench_function("conv2d 16x8x8x8 k3 forward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            black_box(tape.constant(x.clone()).conv2d(tape.constant(k.clone())).unwrap().value());
        })
    });
    c.bench_function("conv2d 16x8x8x8 k3 forward+backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let y = tape.var(x.clone()).conv2d(tape.var(k.clone())).unwrap();
            black_box(tape.backward(y.square().sum()).unwrap());
        })
    });
}

fn model(c: &mut Criterion) {
    let model = FlowModel::new(small_image_config(), 0).unwrap();
    let x = sprite_batch(16);
    c.bench_function("image model log_likelihood (16 x 8x8)", |b| {
        b.iter(|| black_box(model.log_likelihood(&x, None).unwrap()))
    });
    let (latent, _) = model.encode(&x, None).unwrap();
    c.bench_function("image model decode (16 x 8x8)", |b| {
        b.iter(|| black_box(model.decode(&latent, None).unwrap()))
    });
}

fn training(c: &mut Criterion) {
    let mut cfg = TrainConfig::new(small_image_config());
    cfg.batch_size = 16;
    let data = TrainData::Images(nvp_core::datapipe::sprite_corpus(256, 8, 1, 1).unwrap());
    let mut trainer = Trainer::new(cfg).unwrap();
    c.bench_function("image train step (batch 16)", |b| b.iter(|| black_box(trainer.train_step(&data).unwrap())));

    let mut toy = ModelConfig::vector(2, 4);
    toy.hidden = 32;
    let data = TrainData::Points(Toy2D::new(Toy2DKind::GaussianMixture, 0).sample(4096).unwrap());
    let mut trainer = Trainer::new(TrainConfig::new(toy)).unwrap();
    c.bench_function("toy train step (batch 64)", |b| b.iter(|| black_box(trainer.train_step(&data).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv, model, training
}
criterion_main!(benches);
