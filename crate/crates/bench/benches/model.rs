use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dipole_bench::{model, patients};
use dipole_core::nn_core::Tape;
use dipole_core::recurrent::{gru_step, GruParams};
use dipole_core::train_eval::Adadelta;
use dipole_core::{CausalityMode, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn gru(c: &mut Criterion) {
    let mut g = c.benchmark_group("gru_step");
    for dim in [16, 64, 128] {
        let params = GruParams::init(dim, dim, &mut ChaCha8Rng::seed_from_u64(1));
        let v = Tensor::vector((0..dim).map(|i| (i as f64 * 0.37).sin()).collect());
        let h = Tensor::vector((0..dim).map(|i| (i as f64 * 0.11).cos() * 0.5).collect());
        g.bench_function(format!("dim{dim}"), |b| b.iter(|| gru_step(&params, black_box(&v), black_box(&h)).unwrap()));
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let data = patients(8, 3);
    let mut g = c.benchmark_group("forward_patient");
    for variant in [Variant::Rnn, Variant::DipolePlain, Variant::DipoleL, Variant::DipoleG, Variant::DipoleC] {
        let m = model(variant, 16);
        g.bench_function(variant.as_str(), |b| {
            b.iter(|| {
                for p in &data {
                    black_box(m.predict(p, CausalityMode::Prefix).unwrap());
                }
            })
        });
    }
    g.finish();
}

fn training_batch(c: &mut Criterion) {
    let data = patients(10, 4);
    let mut g = c.benchmark_group("training_batch");
    g.sample_size(10);
    for variant in [Variant::Rnn, Variant::DipoleC] {
        let base = model(variant, 16);
        g.bench_function(variant.as_str(), |b| {
            b.iter_batched(
                || {
                    let m = base.clone();
                    let opt = Adadelta::with_defaults(m.store());
                    (m, opt)
                },
                |(mut m, mut opt)| {
                    let mut grads = m.store().zero_grads();
                    {
                        let mut tape = Tape::new(m.store());
                        let loss = m.batch_loss(&mut tape, &data, CausalityMode::Prefix).unwrap();
                        tape.backward(loss, &mut grads).unwrap();
                    }
                    opt.step(m.store_mut(), &grads);
                    m
                },
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, gru, forward, training_batch);
criterion_main!(benches);
