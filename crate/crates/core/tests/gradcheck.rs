//! Central finite-difference checks of reverse-mode gradients.

use detpp_core::event::{Event, EventSequence};
use detpp_core::grad::{ParamId, Tape, Tensor};
use detpp_core::model::{EncoderConfig, Method, Model};
use detpp_core::train::sequence_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// loss = sum(log_softmax(W3 tanh(W2 sigmoid(W1 x + b1))) * y) + mean(softplus(..)) + sum(abs(..))
fn composite(inputs: &[Tensor]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let (x, w1, b1, w2, w3, y) = (vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]);
    let h1 = tape.matmul(x, w1).unwrap();
    let h1 = tape.add(h1, b1).unwrap();
    let h1 = tape.sigmoid(h1).unwrap();
    let h2 = tape.matmul(h1, w2).unwrap();
    let h2 = tape.tanh(h2).unwrap();
    let out = tape.matmul(h2, w3).unwrap();
    let ls = tape.log_softmax(out).unwrap();
    let weighted = tape.mul(ls, y).unwrap();
    let a = tape.sum(weighted).unwrap();
    let sp = tape.softplus(out).unwrap();
    let b = tape.mean(sp).unwrap();
    let ab = tape.abs(h2).unwrap();
    let c = tape.sum(ab).unwrap();
    let lsig = tape.log_sigmoid(out).unwrap();
    let d = tape.sum(lsig).unwrap();
    let ab2 = tape.add(a, b).unwrap();
    let cd = tape.sub(c, d).unwrap();
    let loss = tape.add(ab2, cd).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = vars.iter().map(|&v| grads.wrt(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(v).len()])).collect();
    (tape.scalar(loss), g)
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let inputs = vec![
            random_tensor(&mut rng, &[3, 4]),
            random_tensor(&mut rng, &[4, 5]),
            random_tensor(&mut rng, &[3, 5]),
            random_tensor(&mut rng, &[5, 6]),
            random_tensor(&mut rng, &[6, 3]),
            random_tensor(&mut rng, &[3, 3]),
        ];
        let (_, analytic) = composite(&inputs);
        for (k, grad) in analytic.iter().enumerate() {
            let mut numeric = vec![0.0; grad.len()];
            for i in 0..grad.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += H;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= H;
                numeric[i] = (composite(&plus).0 - composite(&minus).0) / (2.0 * H);
            }
            assert!(rel_err(grad, &numeric) < 1e-6, "input {k}: {grad:?} vs {numeric:?}");
        }
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, n: usize, num_labels: usize) -> EventSequence {
    let mut t = 0.0;
    let events = (0..n)
        .map(|_| {
            t += rng.random_range(0.05..1.0);
            Event::new(t, rng.random_range(0..num_labels))
        })
        .collect();
    EventSequence::new("s", events).unwrap()
}

fn model_gradcheck(model: &mut Model, seq: &EventSequence) -> f64 {
    let analytic = sequence_loss(model, seq, 1, true).unwrap().grads.unwrap();
    let mut worst: f64 = 0.0;
    for p in 0..model.params().len() {
        let id = ParamId(p);
        let a = analytic.get(id).to_vec();
        let mut numeric = vec![0.0; a.len()];
        for i in 0..a.len() {
            let orig = model.params().get(id).value.data()[i];
            model.params_mut().get_mut(id).value.data_mut()[i] = orig + H;
            let up = sequence_loss(model, seq, 1, false).unwrap().loss_sum;
            model.params_mut().get_mut(id).value.data_mut()[i] = orig - H;
            let down = sequence_loss(model, seq, 1, false).unwrap().loss_sum;
            model.params_mut().get_mut(id).value.data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(&a, &numeric));
    }
    worst
}

#[test]
fn gru_baseline_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for method in [Method::MaeCe, Method::MaeCeK] {
        for trial in 0..3 {
            let mut cfg = EncoderConfig::new(3, 3, 2.0);
            cfg.embed_dim = 3;
            cfg.hidden_dim = 5;
            let mut model = Model::new(cfg, method, trial, None).unwrap();
            let seq = random_sequence(&mut rng, 6, 3);
            let err = model_gradcheck(&mut model, &seq);
            assert!(err < 1e-5, "{method} trial {trial}: relative error {err}");
        }
    }
}

#[test]
fn detpp_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..5 {
        let mut cfg = EncoderConfig::new(rng.random_range(2..=5), rng.random_range(1..=4), 1.5);
        cfg.embed_dim = 4;
        cfg.hidden_dim = rng.random_range(2..=8);
        let mut model = Model::new(cfg.clone(), Method::Detpp, trial, Some(0.3)).unwrap();
        let seq = random_sequence(&mut rng, 7, cfg.num_labels);
        let err = model_gradcheck(&mut model, &seq);
        assert!(err < 1e-4, "trial {trial}: relative error {err}");
    }
}
