//! Synthetic benchmark comparing DeTPP with the next-event and next-K baselines.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::event::{round_timestamp, EventSequence};
use crate::infer::Thresholds;
use crate::metrics::{evaluate_run, EvalConfig, MetricReport};
use crate::model::Method;
use crate::synth::{generate_markov_bursts, split_dataset, MarkovBurstSpec};
use crate::train::{train, TrainConfig, TrainedModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n_sequences: usize,
    pub num_labels: usize,
    pub t_max: f64,
    pub k_slots: usize,
    /// Horizon length in units of the mean inter-event gap.
    pub horizon_events: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_sequences: 720,
            num_labels: 5,
            t_max: 50.0,
            k_slots: 16,
            horizon_events: 10.0,
            epochs: 15,
            batch_size: 16,
            learning_rate: 3e-3,
            embed_dim: 8,
            hidden_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub epochs_run: usize,
    pub final_val_loss: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceReport {
    pub seed: u64,
    pub horizon: f64,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub spec: BenchmarkSpec,
    pub results: Vec<MethodResult>,
}

impl ReproduceReport {
    pub fn result(&self, method: Method) -> Option<&MetricReport> {
        self.results.iter().find(|r| r.method == method.as_str()).map(|r| &r.report)
    }
}

pub struct BenchmarkData {
    pub train: Vec<EventSequence>,
    pub val: Vec<EventSequence>,
    pub test: Vec<EventSequence>,
    pub horizon: f64,
}

/// Markov-burst data and its horizon: `horizon_events` mean gaps.
pub fn benchmark_data(spec: &BenchmarkSpec, seed: u64) -> Result<BenchmarkData> {
    let gen = MarkovBurstSpec::new(spec.num_labels, spec.t_max, seed);
    let sequences = generate_markov_bursts(&gen, spec.n_sequences)?;
    let (train, val, test) = split_dataset(sequences, (0.7, 0.15, 0.15), seed)?;
    let (mut gaps, mut count) = (0.0, 0usize);
    for seq in &train {
        for w in seq.events().windows(2) {
            gaps += w[1].t - w[0].t;
            count += 1;
        }
    }
    let horizon = round_timestamp(spec.horizon_events * gaps / count.max(1) as f64);
    Ok(BenchmarkData { train, val, test, horizon })
}

pub fn train_config(spec: &BenchmarkSpec, method: Method, horizon: f64, seed: u64, threads: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(method, spec.num_labels, spec.k_slots, horizon);
    cfg.epochs = spec.epochs;
    cfg.batch_size = spec.batch_size;
    cfg.learning_rate = spec.learning_rate;
    cfg.embed_dim = spec.embed_dim;
    cfg.hidden_dim = spec.hidden_dim;
    cfg.seed = seed;
    cfg.threads = threads;
    cfg
}

pub fn thresholds_of(trained: &TrainedModel) -> Result<Option<Thresholds>> {
    trained.calibration.as_ref().map(Thresholds::from_calibration).transpose()
}

/// Generates the benchmark, trains every method and evaluates on the test split.
pub fn reproduce(spec: &BenchmarkSpec, seed: u64, threads: usize) -> Result<ReproduceReport> {
    let data = benchmark_data(spec, seed)?;
    let eval = EvalConfig::new(data.horizon, spec.k_slots);
    let mut results = Vec::new();
    for method in Method::ALL {
        let cfg = train_config(spec, method, data.horizon, seed, threads);
        let outcome = train(&cfg, &data.train, &data.val)?;
        let thresholds = thresholds_of(&outcome.best)?;
        let report = crate::train::with_threads(threads, || evaluate_run(&outcome.best.model, thresholds.as_ref(), &data.test, &eval))??;
        results.push(MethodResult {
            method: method.to_string(),
            epochs_run: outcome.log.len(),
            final_val_loss: outcome.log.last().map_or(f64::NAN, |r| r.val_loss),
            report,
        });
    }
    Ok(ReproduceReport {
        seed,
        horizon: data.horizon,
        train_sequences: data.train.len(),
        test_sequences: data.test.len(),
        spec: spec.clone(),
        results,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.3}"))
}

/// Table with one row per method and the seven metric columns.
pub fn format_table(report: &ReproduceReport) -> String {
    let mut out = format!(
        "{:<10} {:>8} {:>9} {:>10} {:>9} {:>9} {:>8} {:>7}\n",
        "method", "mean_len", "label_H", "time_dH", "next_acc", "next_mae", "otd", "t_map"
    );
    for r in &report.results {
        let m = &r.report;
        out.push_str(&format!(
            "{:<10} {:>8.2} {:>9} {:>10} {:>9.3} {:>9} {:>8.3} {:>7.3}\n",
            r.method,
            m.mean_length,
            opt(m.label_entropy),
            opt(m.time_delta_diff_entropy),
            m.next_item_accuracy,
            opt(m.next_item_mae),
            m.otd,
            m.t_map
        ));
    }
    out
}
