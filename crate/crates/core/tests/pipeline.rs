use detpp_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use detpp_core::event::{load_sequences, save_sequences, EventSequence};
use detpp_core::experiment::thresholds_of;
use detpp_core::infer::{oracle_predictions, read_predictions, write_predictions};
use detpp_core::metrics::{evaluate_predictions, evaluate_run, predict_dataset, EvalConfig};
use detpp_core::model::Method;
use detpp_core::synth::{generate_hawkes, generate_markov_bursts, HawkesSpec, MarkovBurstSpec};
use detpp_core::train::{dataset_loss, init_model, resume_training, train, TrainConfig};

fn markov(n: usize, seed: u64) -> Vec<EventSequence> {
    generate_markov_bursts(&MarkovBurstSpec::new(4, 20.0, seed), n).unwrap()
}

fn small_config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::new(method, 4, 6, 5.0);
    cfg.hidden_dim = 16;
    cfg.embed_dim = 8;
    cfg.epochs = 3;
    cfg.learning_rate = 5e-3;
    cfg.seed = 9;
    cfg.threads = 1;
    cfg
}

#[test]
fn dataset_round_trip_of_1000_sequences() {
    let spec = HawkesSpec::new(vec![0.3, 0.2, 0.1], vec![vec![0.2; 3]; 3], 1.5, 15.0, 4).unwrap();
    let seqs = generate_hawkes(&spec, 1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_sequences(&seqs, &path).unwrap();
    assert_eq!(load_sequences(&path, 3).unwrap(), seqs);
    assert!(load_sequences(&path, 2).is_err() || seqs.iter().all(|s| s.events().iter().all(|e| e.label < 2)));
}

#[test]
fn detpp_smoke_fit_reduces_loss_by_a_fifth() {
    let data = generate_markov_bursts(&MarkovBurstSpec::new(4, 20.0, 1), 200).unwrap();
    let mut cfg = small_config(Method::Detpp);
    cfg.epochs = 5;
    let initial = dataset_loss(&init_model(&cfg, &data).unwrap(), &data, 1).unwrap();
    let outcome = train(&cfg, &data, &data[..20]).unwrap();
    let fin = dataset_loss(&outcome.last.model, &data, 1).unwrap();
    assert!(fin < 0.8 * initial, "initial {initial}, final {fin}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = markov(30, 2);
    let mut cfg = small_config(Method::MaeCeK);
    cfg.learning_rate = 0.0;
    cfg.epochs = 2;
    let before = init_model(&cfg, &data).unwrap();
    let outcome = train(&cfg, &data, &data[..5]).unwrap();
    assert_eq!(outcome.last.model.params(), before.params());
}

#[test]
fn training_is_deterministic_and_thread_independent() {
    let data = markov(40, 3);
    for method in Method::ALL {
        let cfg = small_config(method);
        let a = train(&cfg, &data, &data[..8]).unwrap();
        let mut cfg4 = cfg.clone();
        cfg4.threads = 4;
        let b = train(&cfg4, &data, &data[..8]).unwrap();
        assert_eq!(a.last.model, b.last.model, "{method}");
        assert_eq!(a.best, b.best);
        let ra: Vec<_> = a.log.iter().map(|r| r.deterministic()).collect();
        let rb: Vec<_> = b.log.iter().map(|r| r.deterministic()).collect();
        assert_eq!(ra, rb);
    }
}

#[test]
fn resume_through_a_checkpoint_continues_identically() {
    let data = markov(40, 4);
    let dir = tempfile::tempdir().unwrap();
    for method in Method::ALL {
        let mut cfg = small_config(method);
        cfg.epochs = 4;
        let full = train(&cfg, &data, &data[..8]).unwrap();

        let mut first = cfg.clone();
        first.epochs = 2;
        let half = train(&first, &data, &data[..8]).unwrap();
        let path = dir.path().join(format!("{method}.ckpt"));
        save_checkpoint(&Checkpoint { trained: half.last, resume: Some(half.resume) }, &path).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let resumed = resume_training(&cfg, ckpt.trained, ckpt.resume.unwrap(), &data, &data[..8]).unwrap();

        assert_eq!(resumed.last.model, full.last.model, "{method}");
        assert_eq!(resumed.best, full.best);
        let ra: Vec<_> = resumed.log.iter().map(|r| r.deterministic()).collect();
        let rb: Vec<_> = full.log.iter().map(|r| r.deterministic()).collect();
        assert_eq!(ra, rb);
    }
}

#[test]
fn dumped_predictions_evaluate_like_in_memory() {
    let data = markov(40, 5);
    let dir = tempfile::tempdir().unwrap();
    for method in Method::ALL {
        let cfg = small_config(method);
        let outcome = train(&cfg, &data, &data[..8]).unwrap();
        let path = dir.path().join("best.ckpt");
        save_checkpoint(&Checkpoint { trained: outcome.best.clone(), resume: None }, &path).unwrap();
        let trained = load_checkpoint(&path).unwrap().trained;
        assert_eq!(trained, outcome.best);
        let thresholds = thresholds_of(&trained).unwrap();
        assert_eq!(thresholds.is_some(), method == Method::Detpp);

        let eval = EvalConfig::new(cfg.horizon, cfg.k_slots);
        let test = markov(10, 6);
        let direct = evaluate_run(&trained.model, thresholds.as_ref(), &test, &eval).unwrap();
        let records = predict_dataset(&trained.model, thresholds.as_ref(), &test, &eval).unwrap();
        let dump = dir.path().join("pred.jsonl");
        write_predictions(&records, &dump).unwrap();
        let back = read_predictions(&dump).unwrap();
        assert_eq!(back, records);
        let from_dump = evaluate_predictions(&back, &test, &eval).unwrap();
        assert_eq!(serde_json::to_string(&from_dump).unwrap(), serde_json::to_string(&direct).unwrap());
    }
}

#[test]
fn oracle_predictions_score_perfectly() {
    let data = markov(20, 7);
    let eval = EvalConfig::new(4.0, 8);
    let report = evaluate_predictions(&oracle_predictions(&data, 4.0, 8, 1), &data, &eval).unwrap();
    assert_eq!(report.otd, 0.0);
    assert_eq!(report.t_map, 1.0);
    assert_eq!(report.next_item_accuracy, 1.0);
    assert_eq!(report.next_item_mae, Some(0.0));
    assert_eq!(report.label_entropy, report.gt_label_entropy);
}

#[test]
fn missing_anchor_is_reported() {
    let data = markov(3, 8);
    let mut records = oracle_predictions(&data, 4.0, 8, 1);
    let dropped = records.remove(1);
    let err = evaluate_predictions(&records, &data, &EvalConfig::new(4.0, 8)).unwrap_err().to_string();
    assert!(err.contains(&dropped.id), "{err}");
}

#[test]
fn empty_forecasts_give_degenerate_metrics() {
    let data = markov(20, 9);
    let eval = EvalConfig::new(4.0, 8);
    let mut records = oracle_predictions(&data, 4.0, 8, 1);
    let mut gt_count = 0usize;
    for r in &mut records {
        gt_count += r.events.len();
        r.events.clear();
        r.ranked = None;
        r.next = None;
    }
    let report = evaluate_predictions(&records, &data, &eval).unwrap();
    assert_eq!(report.mean_length, 0.0);
    assert_eq!(report.t_map, 0.0);
    assert_eq!(report.next_item_accuracy, 0.0);
    assert_eq!(report.next_item_mae, None);
    assert_eq!(report.label_entropy, None);
    assert!((report.otd - eval.c_del * gt_count as f64 / report.anchors as f64).abs() < 1e-12);
    assert!(evaluate_predictions(&[], &[], &eval).is_err());
}
