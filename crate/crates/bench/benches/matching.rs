use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use detpp_core::grad::{Tape, Tensor};
use detpp_core::matching::{hungarian, matching_loss, CostMatrix};
use detpp_core::model::SlotVars;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in [4usize, 16, 32, 64] {
        let t = k / 2;
        let cost = CostMatrix::new(t, k, (0..t * k).map(|_| rng.random_range(0.0..10.0)).collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{t}x{k}")), &cost, |b, cost| {
            b.iter(|| hungarian(black_box(cost)).unwrap())
        });
    }
    group.finish();
}

fn bench_matching_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("matching_loss_fwd_bwd");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l = 5;
    for k in [8usize, 16, 32] {
        let t = k / 2;
        let shifts: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..5.0)).collect();
        let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..l)).collect();
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t_hat: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
        let raw: Vec<f64> = (0..k * l).map(|_| rng.random_range(-2.0..2.0)).collect();
        group.bench_function(BenchmarkId::from_parameter(k), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let o_logit = tape.leaf(Tensor::vector(logits.clone())).unwrap();
                let t_shift = tape.leaf(Tensor::vector(t_hat.clone())).unwrap();
                let r = tape.leaf(Tensor::new(vec![k, l], raw.clone()).unwrap()).unwrap();
                let log_probs = tape.log_softmax(r).unwrap();
                let vars = SlotVars { o_logit, t_shift, log_probs };
                let (loss, _) = matching_loss(&mut tape, &shifts, &labels, &vars).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_hungarian, bench_matching_loss);
criterion_main!(benches);
