use detpp_core::calibrate::{lower_quantile, CalibrationState};
use detpp_core::event::Event;
use detpp_core::infer::autoregressive_rollout;
use detpp_core::metrics::{label_entropy, next_item_metrics, time_delta_diff_entropy};
use detpp_core::model::{EncoderConfig, Method, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

fn constant_next_event_model(shift_raw: f64, label: usize) -> Model {
    let mut cfg = EncoderConfig::new(3, 4, 4.0);
    cfg.hidden_dim = 6;
    cfg.embed_dim = 3;
    let mut model = Model::new(cfg, Method::MaeCe, 1, None).unwrap();
    let params = model.params_mut();
    let w = params.find("head.weight").unwrap();
    params.get_mut(w).value.data_mut().fill(0.0);
    let b = params.find("head.bias").unwrap();
    let bias = params.get_mut(b).value.data_mut();
    bias.fill(0.0);
    bias[0] = shift_raw;
    bias[1 + label] = 5.0;
    model
}

#[test]
fn constant_model_repeats_one_label() {
    // softplus(raw) = 0.5
    let raw = (0.5f64.exp() - 1.0).ln();
    let model = constant_next_event_model(raw, 2);
    let prefix = [Event::new(0.3, 0), Event::new(1.1, 1)];
    let out = autoregressive_rollout(&model, &prefix, 4.0, 100).unwrap();
    assert_eq!(out.len(), 8);
    assert!(out.iter().all(|e| e.label == 2));
    for (i, e) in out.iter().enumerate() {
        assert!((e.t - (1.1 + 0.5 * (i + 1) as f64)).abs() < 1e-12);
    }
    let labels: Vec<usize> = out.iter().map(|e| e.label).collect();
    assert_eq!(label_entropy(&labels).unwrap(), 0.0);
}

#[test]
fn rollout_respects_horizon_and_step_cap() {
    let model = constant_next_event_model(0.0, 1);
    let prefix = [Event::new(2.0, 0)];
    let capped = autoregressive_rollout(&model, &prefix, 4.0, 3).unwrap();
    assert_eq!(capped.len(), 3);
    let full = autoregressive_rollout(&model, &prefix, 4.0, 1000).unwrap();
    assert!(full.iter().all(|e| e.t > 2.0 && e.t <= 6.0));
    assert!(full.windows(2).all(|w| w[0].t < w[1].t));
    let wrong = Model::new(EncoderConfig::new(3, 4, 4.0), Method::Detpp, 1, Some(0.2)).unwrap();
    assert!(autoregressive_rollout(&wrong, &prefix, 4.0, 3).is_err());
}

#[test]
fn median_predictor_on_exponential_gaps_has_mae_ln2() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let exp = Exp::new(1.0).unwrap();
    let items: Vec<_> = (0..200_000).map(|_| (std::f64::consts::LN_2, 0, exp.sample(&mut rng), 0)).collect();
    let (acc, mae) = next_item_metrics(&items).unwrap();
    assert_eq!(acc, 1.0);
    assert!((mae - std::f64::consts::LN_2).abs() < 0.01, "{mae}");
}

#[test]
fn differential_entropy_matches_analytic_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let exp = Exp::new(1.0).unwrap();
    let xs: Vec<f64> = (0..100_000).map(|_| exp.sample(&mut rng)).collect();
    let h = time_delta_diff_entropy(&xs).unwrap();
    assert!((h.value - 1.0).abs() < 0.05 && !h.degenerate, "{h:?}");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let xs: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
    let h = time_delta_diff_entropy(&xs).unwrap();
    assert!((h.value - 1.4189).abs() < 0.05, "{h:?}");
    let constant = vec![1.5; 200];
    assert!(time_delta_diff_entropy(&constant).unwrap().degenerate);
}

#[test]
fn reservoir_quantiles_track_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cal = CalibrationState::new(2, 1024, 8);
    let mut all = [Vec::new(), Vec::new()];
    for _ in 0..50_000 {
        for (j, pool) in all.iter_mut().enumerate() {
            let x: f64 = rng.random::<f64>().powi(j as i32 + 1);
            cal.observe(j, x, rng.random_bool(0.3));
            pool.push(x);
        }
    }
    for (j, pool) in all.iter_mut().enumerate() {
        pool.sort_by(f64::total_cmp);
        for q in [0.1, 0.25, 0.5, 0.7, 0.9] {
            let est = cal.quantile(j, q).unwrap();
            assert!((est - lower_quantile(pool, q)).abs() < 0.03, "slot {j} q {q}");
        }
        assert!((cal.match_rate(j) - 0.3).abs() < 0.01);
    }
}
