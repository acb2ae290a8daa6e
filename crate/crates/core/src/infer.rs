//! Turning head outputs into forecasts, and the prediction dump format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationState;
use crate::error::{Error, Result};
use crate::event::{Event, EventSequence};
use crate::grad::{Tape, Tensor};
use crate::model::{EventPrediction, Method, Model, PredictionSet};

/// A forecast event in absolute time. `score` ranks predictions for T-mAP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForecastEvent {
    pub t: f64,
    pub label: usize,
    pub score: f64,
}

/// Calibrated per-slot presence thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct Thresholds(Vec<f64>);

impl Thresholds {
    pub fn from_calibration(cal: &CalibrationState) -> Result<Self> {
        cal.thresholds().map(Self)
    }

    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn sort_by_time(mut events: Vec<(usize, ForecastEvent)>) -> Vec<ForecastEvent> {
    events.sort_by(|a, b| a.1.t.total_cmp(&b.1.t).then(a.0.cmp(&b.0)));
    events.into_iter().map(|(_, e)| e).collect()
}

fn slot_event(preds: &PredictionSet, j: usize, anchor: f64) -> ForecastEvent {
    let s = &preds.slots[j];
    ForecastEvent { t: anchor + s.t_shift, label: s.argmax_label(), score: s.presence() }
}

/// Keeps slots whose presence reaches their threshold, sorted by time
/// (ties by slot index).
pub fn forecast(preds: &PredictionSet, anchor: f64, thresholds: &Thresholds) -> Result<Vec<ForecastEvent>> {
    if thresholds.0.len() != preds.len() {
        return Err(Error::Uncalibrated(format!(
            "{} thresholds for {} slots",
            thresholds.0.len(),
            preds.len()
        )));
    }
    let kept = (0..preds.len())
        .filter(|&j| preds.slots[j].presence() >= thresholds.0[j])
        .map(|j| (j, slot_event(preds, j, anchor)))
        .collect();
    Ok(sort_by_time(kept))
}

/// All slots, sorted by time, with presence as the score.
pub fn forecast_unfiltered_ranked(preds: &PredictionSet, anchor: f64) -> Vec<ForecastEvent> {
    sort_by_time((0..preds.len()).map(|j| (j, slot_event(preds, j, anchor))).collect())
}

/// Next-K slots as events sorted by time, scored by label confidence.
pub fn next_k_forecast(preds: &[EventPrediction], anchor: f64) -> Vec<ForecastEvent> {
    sort_by_time(
        preds
            .iter()
            .enumerate()
            .map(|(j, p)| (j, ForecastEvent { t: anchor + p.t_shift, label: p.argmax_label(), score: p.confidence() }))
            .collect(),
    )
}

/// Feeds next-event predictions back as observations, starting from the
/// hidden state `hidden` at `anchor`. Stops at the first event past
/// `anchor + horizon` or after `max_steps` events.
pub fn rollout_from_state(model: &Model, hidden: &[f64], anchor: f64, horizon: f64, max_steps: usize) -> Result<Vec<ForecastEvent>> {
    if model.method() != Method::MaeCe {
        return Err(Error::invalid("autoregressive rollout needs a next-event model"));
    }
    if max_steps == 0 {
        return Err(Error::invalid("max_steps must be at least 1"));
    }
    let mut tape = Tape::new();
    let enc = model.encoder_vars(&mut tape)?;
    let mut h = tape.leaf(Tensor::new(vec![1, hidden.len()], hidden.to_vec())?)?;
    let mut elapsed = 0.0;
    let mut out = Vec::new();
    loop {
        let row = model.head(&mut tape, h)?;
        let pred = model.decode_events(tape.value(row)).remove(0);
        elapsed += pred.t_shift;
        if elapsed > horizon {
            break;
        }
        let label = pred.argmax_label();
        out.push(ForecastEvent { t: anchor + elapsed, label, score: pred.confidence() });
        if out.len() >= max_steps {
            break;
        }
        h = model.advance(&mut tape, &enc, h, label, pred.t_shift)?;
    }
    Ok(out)
}

/// Encodes `prefix` and rolls out from its last event.
pub fn autoregressive_rollout(model: &Model, prefix: &[Event], horizon: f64, max_steps: usize) -> Result<Vec<ForecastEvent>> {
    let mut tape = Tape::new();
    let enc = model.encoder_vars(&mut tape)?;
    let hidden = model.encode(&mut tape, &enc, prefix)?;
    let hd = model.config().hidden_dim;
    let last = &tape.value(hidden)[(prefix.len() - 1) * hd..];
    rollout_from_state(model, last, prefix[prefix.len() - 1].t, horizon, max_steps)
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub anchor_index: usize,
    /// Final forecast as `[t, label, score]`.
    pub events: Vec<(f64, usize, f64)>,
    /// Every slot with its score, before thresholding (DeTPP only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranked: Option<Vec<(f64, usize, f64)>>,
    /// Single next-event prediction `[t, label]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<(f64, usize)>,
}

fn to_triples(events: &[ForecastEvent]) -> Vec<(f64, usize, f64)> {
    events.iter().map(|e| (e.t, e.label, e.score)).collect()
}

pub fn from_triples(events: &[(f64, usize, f64)]) -> Vec<ForecastEvent> {
    events.iter().map(|&(t, label, score)| ForecastEvent { t, label, score }).collect()
}

/// Anchor positions evaluated for a sequence: every index from
/// `min_history - 1` that still has a following event.
pub fn evaluation_anchors(seq: &EventSequence, min_history: usize) -> std::ops::Range<usize> {
    let start = min_history.max(1) - 1;
    start..seq.len().saturating_sub(1).max(start)
}

/// Settings that shape predictions at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictConfig {
    pub min_history: usize,
    /// Step cap for autoregressive rollouts.
    pub max_steps: usize,
}

/// Predictions for every evaluation anchor of one sequence.
pub fn predict_sequence(
    model: &Model,
    thresholds: Option<&Thresholds>,
    seq: &EventSequence,
    config: &PredictConfig,
) -> Result<Vec<PredictionRecord>> {
    let anchors = evaluation_anchors(seq, config.min_history);
    if anchors.is_empty() {
        return Ok(Vec::new());
    }
    let events = seq.events();
    let horizon = model.config().horizon;
    let mut tape = Tape::new();
    let (hidden, out) = model.forward(&mut tape, events)?;
    let width = model.config().head_width(model.method());
    let hd = model.config().hidden_dim;
    let rows = tape.value(out);
    let states = tape.value(hidden);
    anchors
        .map(|n| {
            let anchor = events[n].t;
            let row = &rows[n * width..(n + 1) * width];
            let (forecast_events, ranked, next) = match model.method() {
                Method::Detpp => {
                    let thresholds = thresholds
                        .ok_or_else(|| Error::Uncalibrated("DeTPP prediction needs thresholds".into()))?;
                    let preds = model.decode_detpp(row);
                    let kept = forecast(&preds, anchor, thresholds)?;
                    let ranked = forecast_unfiltered_ranked(&preds, anchor);
                    let next = match kept.first() {
                        Some(e) => (e.t, e.label),
                        None => {
                            let best = preds
                                .slots
                                .iter()
                                .enumerate()
                                .fold(0, |b, (j, s)| if s.o_logit > preds.slots[b].o_logit { j } else { b });
                            let s = &preds.slots[best];
                            (anchor + s.t_shift, s.argmax_label())
                        }
                    };
                    (kept, Some(ranked), next)
                }
                Method::MaeCe => {
                    let first = model.decode_events(row).remove(0);
                    let next = (anchor + first.t_shift, first.argmax_label());
                    let state = &states[n * hd..(n + 1) * hd];
                    let rolled = rollout_from_state(model, state, anchor, horizon, config.max_steps)?;
                    (rolled, None, next)
                }
                Method::MaeCeK => {
                    let preds = model.decode_events(row);
                    let next = (anchor + preds[0].t_shift, preds[0].argmax_label());
                    (next_k_forecast(&preds, anchor), None, next)
                }
            };
            Ok(PredictionRecord {
                id: seq.id().to_string(),
                anchor_index: n,
                events: to_triples(&forecast_events),
                ranked: ranked.as_deref().map(to_triples),
                next: Some(next),
            })
        })
        .collect()
}

/// Ground truth written as if it were a forecast; useful as an oracle.
pub fn oracle_predictions(sequences: &[EventSequence], horizon: f64, max_events: usize, min_history: usize) -> Vec<PredictionRecord> {
    sequences
        .iter()
        .flat_map(|seq| {
            evaluation_anchors(seq, min_history).map(move |n| {
                let window = seq.window(n, horizon);
                let events: Vec<(f64, usize, f64)> =
                    window.iter().take(max_events).map(|e| (e.t, e.label, 1.0)).collect();
                let next = seq.events()[n + 1];
                PredictionRecord {
                    id: seq.id().to_string(),
                    anchor_index: n,
                    ranked: Some(events.clone()),
                    events,
                    next: Some((next.t, next.label)),
                }
            })
        })
        .collect()
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
