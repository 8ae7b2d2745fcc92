use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use deva_core::harness::config::TrainConfig;
use deva_core::harness::gradcheck::random_batch;
use deva_core::model::Deva;
use deva_core::tpf::{compute_loss, Targets};
use deva_core::{ParamStore, Tape};

fn forward_backward(c: &mut Criterion) {
    let config = TrainConfig::default();
    let mut store = ParamStore::new();
    let model = Deva::new(config.model.clone(), &mut store, 1).unwrap();
    let (batch, labels) = random_batch(&config, config.optim.batch_size, 2).unwrap();
    let targets = Targets::Real(labels);

    c.bench_function("forward_batch32_desk", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            model.forward(&mut tape, &store, &batch).unwrap()
        })
    });

    c.bench_function("forward_backward_batch32_desk", |b| {
        b.iter_batched(
            || store.clone(),
            |mut s| {
                let mut tape = Tape::with_dropout(3);
                let y = model.forward(&mut tape, &s, &batch).unwrap();
                let loss = compute_loss(&mut tape, y, &targets, config.optim.loss).unwrap();
                tape.backward(loss, &mut s).unwrap();
                s
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward_backward
}
criterion_main!(benches);
