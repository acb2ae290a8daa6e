use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use detpp_core::model::Method;
use detpp_core::synth::{generate_markov_bursts, MarkovBurstSpec};
use detpp_core::train::{sequence_loss, train, TrainConfig};

fn config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::new(method, 5, 16, 10.0);
    cfg.hidden_dim = 32;
    cfg.embed_dim = 8;
    cfg.threads = 1;
    cfg
}

fn bench_sequence_loss(c: &mut Criterion) {
    let data = generate_markov_bursts(&MarkovBurstSpec::new(5, 50.0, 3), 1).unwrap();
    let mut group = c.benchmark_group("sequence_loss_with_grad");
    for method in Method::ALL {
        let model = detpp_core::train::init_model(&config(method), &data).unwrap();
        group.bench_function(method.as_str(), |b| b.iter(|| sequence_loss(&model, black_box(&data[0]), 1, true).unwrap()));
    }
    group.finish();
}

fn bench_epoch(c: &mut Criterion) {
    let data = generate_markov_bursts(&MarkovBurstSpec::new(5, 50.0, 4), 64).unwrap();
    let mut group = c.benchmark_group("one_epoch_64_sequences");
    group.sample_size(10);
    for method in Method::ALL {
        let mut cfg = config(method);
        cfg.epochs = 1;
        cfg.calibration_warmup = 0;
        group.bench_function(method.as_str(), |b| b.iter(|| train(&cfg, &data[..56], &data[56..]).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_sequence_loss, bench_epoch);
criterion_main!(benches);
