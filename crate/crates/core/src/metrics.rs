//! Forecast quality and diversity metrics.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventSequence};
use crate::infer::{evaluation_anchors, from_triples, predict_sequence, ForecastEvent, PredictConfig, PredictionRecord, Thresholds};
use crate::matching::{hungarian, CostMatrix};
use crate::model::Model;

/// Smallest nearest-neighbour distance used by the entropy estimator.
pub const NN_DISTANCE_FLOOR: f64 = 1e-12;
pub const MIN_ENTROPY_SAMPLES: usize = 50;

/// Accuracy of predicted next labels and mean absolute error of predicted
/// next gaps. Each item is `(pred_dt, pred_label, true_dt, true_label)`.
pub fn next_item_metrics(items: &[(f64, usize, f64, usize)]) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::invalid("next-item metrics need at least one anchor"));
    }
    let n = items.len() as f64;
    let correct = items.iter().filter(|(_, p, _, t)| p == t).count() as f64;
    let mae = items.iter().map(|(p, _, t, _)| (p - t).abs()).sum::<f64>() / n;
    Ok((correct / n, mae))
}

/// Transport distance between two event lists. Events may be matched only
/// when their labels agree, at cost `|Δt|` capped at `2 * c_del`; every
/// unmatched event on either side costs `c_del`.
pub fn otd(pred: &[Event], gt: &[Event], c_del: f64) -> f64 {
    let (small, large) = if pred.len() <= gt.len() { (pred, gt) } else { (gt, pred) };
    let unmatched = c_del * (large.len() - small.len()) as f64;
    if small.is_empty() {
        return unmatched;
    }
    // Matching at the cap costs the same as deleting both, so a maximal
    // matching on capped costs is optimal.
    let cap = 2.0 * c_del;
    let data = small
        .iter()
        .flat_map(|a| {
            large.iter().map(move |b| if a.label == b.label { (a.t - b.t).abs().min(cap) } else { cap })
        })
        .collect();
    let cost = CostMatrix::new(small.len(), large.len(), data).expect("dimensions agree");
    let assignment = hungarian(&cost).expect("finite costs, rows <= cols");
    assignment.cost(&cost) + unmatched
}

/// Predictions and ground truth of one forecast window.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorWindow {
    pub predictions: Vec<ForecastEvent>,
    pub truth: Vec<Event>,
}

/// Mean over ground-truth labels of the average precision of score-ranked
/// predictions. A prediction is a hit when an unmatched ground-truth event of
/// the same label and window lies within `delta`; the nearest one is taken.
pub fn t_map(windows: &[AnchorWindow], delta: f64) -> f64 {
    let mut gt_count: BTreeMap<usize, usize> = BTreeMap::new();
    for e in windows.iter().flat_map(|w| &w.truth) {
        *gt_count.entry(e.label).or_default() += 1;
    }
    if gt_count.is_empty() {
        return 0.0;
    }
    let mut by_label: HashMap<usize, Vec<(f64, usize, usize)>> = HashMap::new();
    for (w, window) in windows.iter().enumerate() {
        for (p, e) in window.predictions.iter().enumerate() {
            by_label.entry(e.label).or_default().push((e.score, w, p));
        }
    }
    let mut total = 0.0;
    for (&label, &count) in &gt_count {
        let Some(mut preds) = by_label.remove(&label) else { continue };
        preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: HashMap<(usize, usize), ()> = HashMap::new();
        let (mut hits, mut ap) = (0usize, 0.0);
        for (rank, &(_, w, p)) in preds.iter().enumerate() {
            let t = windows[w].predictions[p].t;
            let best = windows[w]
                .truth
                .iter()
                .enumerate()
                .filter(|(g, e)| e.label == label && !used.contains_key(&(w, *g)) && (e.t - t).abs() <= delta)
                .min_by(|a, b| (a.1.t - t).abs().total_cmp(&(b.1.t - t).abs()));
            if let Some((g, _)) = best {
                used.insert((w, g), ());
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / count as f64;
    }
    total / gt_count.len() as f64
}

/// Shannon entropy (nats) of the empirical label distribution.
pub fn label_entropy(labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("label entropy of an empty pool"));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffEntropy {
    pub value: f64,
    /// Set when most nearest-neighbour distances were exactly zero and the
    /// value is dominated by the distance floor.
    pub degenerate: bool,
}

/// One-dimensional Kozachenko–Leonenko (1-NN) differential entropy estimate:
/// `ψ(N) - ψ(1) + mean(ln(2 d_i))`.
pub fn time_delta_diff_entropy(samples: &[f64]) -> Result<DiffEntropy> {
    let n = samples.len();
    if n < MIN_ENTROPY_SAMPLES {
        return Err(Error::invalid(format!(
            "differential entropy needs at least {MIN_ENTROPY_SAMPLES} samples, got {n}"
        )));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let mut zeros = 0usize;
    let mut log_sum = 0.0;
    for i in 0..n {
        let left = if i > 0 { xs[i] - xs[i - 1] } else { f64::INFINITY };
        let right = if i + 1 < n { xs[i + 1] - xs[i] } else { f64::INFINITY };
        let mut d = left.min(right);
        if d <= 0.0 {
            zeros += 1;
            d = NN_DISTANCE_FLOOR;
        }
        log_sum += (2.0 * d.max(NN_DISTANCE_FLOOR)).ln();
    }
    // ψ(N) - ψ(1) is the harmonic number H_{N-1}.
    let harmonic: f64 = (1..n).map(|k| 1.0 / k as f64).sum();
    Ok(DiffEntropy { value: harmonic + log_sum / n as f64, degenerate: 2 * zeros > n })
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub horizon: f64,
    /// Events kept per window on each side.
    pub max_events: usize,
    pub c_del: f64,
    /// T-mAP time tolerance.
    pub delta: f64,
    pub min_history: usize,
    /// Step cap for autoregressive rollouts.
    pub max_steps: usize,
}

impl EvalConfig {
    pub fn new(horizon: f64, max_events: usize) -> Self {
        Self { horizon, max_events, c_del: 1.0, delta: horizon / 10.0, min_history: 1, max_steps: max_events }
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig { min_history: self.min_history, max_steps: self.max_steps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub anchors: usize,
    pub mean_length: f64,
    pub label_entropy: Option<f64>,
    /// Entropy of ground-truth labels over the same windows, for reference.
    pub gt_label_entropy: Option<f64>,
    pub time_delta_diff_entropy: Option<f64>,
    pub time_delta_degenerate: bool,
    pub next_item_accuracy: f64,
    /// `None` when no anchor has a next-event prediction.
    pub next_item_mae: Option<f64>,
    pub otd: f64,
    pub t_map: f64,
}

fn windowed(events: &[ForecastEvent], anchor: f64, horizon: f64, cap: Option<usize>) -> Vec<ForecastEvent> {
    let mut out: Vec<ForecastEvent> =
        events.iter().copied().filter(|e| crate::event::in_horizon(anchor, horizon, e.t)).collect();
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    if let Some(k) = cap {
        out.truncate(k);
    }
    out
}

/// Scores dumped predictions against a dataset. Every evaluation anchor of
/// every sequence must have exactly one record.
pub fn evaluate_predictions(records: &[PredictionRecord], dataset: &[EventSequence], config: &EvalConfig) -> Result<MetricReport> {
    let mut index: HashMap<(&str, usize), &PredictionRecord> = HashMap::with_capacity(records.len());
    for r in records {
        if index.insert((r.id.as_str(), r.anchor_index), r).is_some() {
            return Err(Error::Validation(format!("duplicate prediction for `{}` anchor {}", r.id, r.anchor_index)));
        }
    }
    let mut missing = Vec::new();
    let mut windows = Vec::new();
    let mut ranked_windows = Vec::new();
    let mut next_items = Vec::new();
    let mut otd_sum = 0.0;
    let mut lengths = 0usize;
    let (mut labels, mut gt_labels, mut deltas) = (Vec::new(), Vec::new(), Vec::new());
    for seq in dataset {
        for n in evaluation_anchors(seq, config.min_history) {
            let Some(record) = index.remove(&(seq.id(), n)) else {
                missing.push(format!("{}#{n}", seq.id()));
                continue;
            };
            let anchor = seq.events()[n].t;
            let truth: Vec<Event> = seq.window(n, config.horizon).iter().take(config.max_events).copied().collect();
            let preds = windowed(&from_triples(&record.events), anchor, config.horizon, Some(config.max_events));
            let ranked = match &record.ranked {
                Some(r) => windowed(&from_triples(r), anchor, config.horizon, None),
                None => preds.clone(),
            };
            let pred_events: Vec<Event> = preds.iter().map(|e| Event::new(e.t, e.label)).collect();
            otd_sum += otd(&pred_events, &truth, config.c_del);
            lengths += preds.len();
            labels.extend(preds.iter().map(|e| e.label));
            gt_labels.extend(truth.iter().map(|e| e.label));
            let mut prev = anchor;
            for e in &preds {
                deltas.push(e.t - prev);
                prev = e.t;
            }
            // An empty forecast with no explicit next event counts as a miss.
            let next = record.next.or_else(|| record.events.first().map(|&(t, l, _)| (t, l)));
            if let Some((next_t, next_label)) = next {
                let true_next = seq.events()[n + 1];
                next_items.push((next_t - anchor, next_label, true_next.t - anchor, true_next.label));
            }
            ranked_windows.push(AnchorWindow { predictions: ranked, truth: truth.clone() });
            windows.push(truth);
        }
    }
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).map(String::as_str).collect();
        return Err(Error::Validation(format!(
            "{} anchors have no prediction: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    if !index.is_empty() {
        let mut extra: Vec<String> = index.keys().map(|(id, n)| format!("{id}#{n}")).collect();
        extra.sort();
        extra.truncate(10);
        return Err(Error::Validation(format!("predictions for unknown anchors: {}", extra.join(", "))));
    }
    let anchors = windows.len();
    if anchors == 0 {
        return Err(Error::Validation("dataset has no evaluation anchors".into()));
    }
    let (accuracy, mae) = match next_item_metrics(&next_items) {
        Ok((acc, mae)) => (acc * next_items.len() as f64 / anchors as f64, Some(mae)),
        Err(_) => (0.0, None),
    };
    let diff = time_delta_diff_entropy(&deltas).ok();
    Ok(MetricReport {
        anchors,
        mean_length: lengths as f64 / anchors as f64,
        label_entropy: label_entropy(&labels).ok(),
        gt_label_entropy: label_entropy(&gt_labels).ok(),
        time_delta_diff_entropy: diff.map(|d| d.value),
        time_delta_degenerate: diff.is_some_and(|d| d.degenerate),
        next_item_accuracy: accuracy,
        next_item_mae: mae,
        otd: otd_sum / anchors as f64,
        t_map: t_map(&ranked_windows, config.delta),
    })
}

/// Predictions for every sequence, in dataset order.
pub fn predict_dataset(model: &Model, thresholds: Option<&Thresholds>, dataset: &[EventSequence], config: &EvalConfig) -> Result<Vec<PredictionRecord>> {
    let predict = config.predict_config();
    let per_seq: Vec<Vec<PredictionRecord>> = dataset
        .par_iter()
        .map(|seq| predict_sequence(model, thresholds, seq, &predict))
        .collect::<Result<_>>()?;
    Ok(per_seq.into_iter().flatten().collect())
}

/// Predicts and scores in memory; identical to dumping and re-reading.
pub fn evaluate_run(model: &Model, thresholds: Option<&Thresholds>, dataset: &[EventSequence], config: &EvalConfig) -> Result<MetricReport> {
    let records = predict_dataset(model, thresholds, dataset, config)?;
    evaluate_predictions(&records, dataset, config)
}
