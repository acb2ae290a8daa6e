//! Optimization driver shared by all three methods.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibrate::{CalibrationState, DEFAULT_RESERVOIR_CAPACITY};
use crate::error::{Error, Result};
use crate::event::{extract_horizon_targets, EventSequence};
use crate::grad::{stable_sigmoid, GradBuffer, ParamStore, Tape, Var};
use crate::matching::{matching_loss, positional_loss};
use crate::model::{EncoderConfig, Method, Model};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub num_labels: usize,
    pub k_slots: usize,
    pub horizon: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub min_history: usize,
    /// Epochs before calibration statistics are collected.
    pub calibration_warmup: usize,
    pub reservoir_capacity: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(method: Method, num_labels: usize, k_slots: usize, horizon: f64) -> Self {
        Self {
            method,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            grad_clip_norm: 1.0,
            seed: 0,
            num_labels,
            k_slots,
            horizon,
            embed_dim: 16,
            hidden_dim: 64,
            min_history: 1,
            calibration_warmup: 1,
            reservoir_capacity: DEFAULT_RESERVOIR_CAPACITY,
            patience: 5,
            threads: 0,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_labels: self.num_labels,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            k_slots: self.k_slots,
            horizon: self.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        if self.batch_size == 0 || self.min_history == 0 || self.patience == 0 {
            return Err(Error::invalid("batch_size, min_history and patience must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::invalid("grad_clip_norm must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one entry per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Bias-corrected Adam update using the gradients stored on `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    let shapes_match = state.m.len() == params.len()
        && state.v.len() == params.len()
        && params.iter().zip(&state.m).zip(&state.v).all(|((p, m), v)| m.len() == p.value.len() && v.len() == p.value.len());
    if !shapes_match {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: params.iter().map(|p| p.value.len()).collect(),
            rhs: state.m.iter().map(Vec::len).collect(),
        });
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grads = p.grad.data().to_vec();
        for (((x, g), m), v) in p.value.data_mut().iter_mut().zip(&grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales stored gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied.
pub fn clip_gradients(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for p in params.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    }
    scale
}

/// Loss summed over the anchors of one sequence.
#[derive(Clone, Debug)]
pub struct SequenceLoss {
    pub loss_sum: f64,
    pub anchors: usize,
    pub grads: Option<GradBuffer>,
    /// `(slot, presence, matched)` for every DeTPP slot at every anchor.
    pub observations: Vec<(usize, f64, bool)>,
}

fn anchor_losses(model: &Model, tape: &mut Tape, seq: &EventSequence, min_history: usize, observations: &mut Vec<(usize, f64, bool)>) -> Result<Vec<Var>> {
    let cfg = model.config();
    let events = seq.events();
    let (_, out) = model.forward(tape, events)?;
    let mut losses = Vec::new();
    match model.method() {
        Method::Detpp => {
            for (n, target) in extract_horizon_targets(seq, cfg.horizon, cfg.k_slots, min_history)? {
                let vars = model.detpp_vars(tape, out, n)?;
                let (loss, assignment) = matching_loss(tape, &target.shifts(), &target.labels(), &vars)?;
                let logits = tape.value(vars.o_logit);
                observations.extend(
                    logits.iter().zip(&assignment.matched).enumerate().map(|(j, (o, m))| (j, stable_sigmoid(*o), *m)),
                );
                losses.push(loss);
            }
        }
        Method::MaeCe => {
            for n in min_history - 1..events.len().saturating_sub(1) {
                let vars = model.event_vars(tape, out, n)?;
                let next = events[n + 1];
                losses.push(positional_loss(tape, &[next.t - events[n].t], &[next.label], &vars)?);
            }
        }
        Method::MaeCeK => {
            for n in min_history - 1..events.len().saturating_sub(1) {
                let vars = model.event_vars(tape, out, n)?;
                let future = &events[n + 1..(n + 1 + cfg.k_slots).min(events.len())];
                let shifts: Vec<f64> = future.iter().map(|e| e.t - events[n].t).collect();
                let labels: Vec<usize> = future.iter().map(|e| e.label).collect();
                losses.push(positional_loss(tape, &shifts, &labels, &vars)?);
            }
        }
    }
    Ok(losses)
}

/// Per-sequence training loss for `model`'s method, with parameter gradients
/// when `with_grad` is set.
pub fn sequence_loss(model: &Model, seq: &EventSequence, min_history: usize, with_grad: bool) -> Result<SequenceLoss> {
    let mut observations = Vec::new();
    if seq.is_empty() {
        return Ok(SequenceLoss { loss_sum: 0.0, anchors: 0, grads: None, observations });
    }
    let mut tape = Tape::new();
    let losses = anchor_losses(model, &mut tape, seq, min_history, &mut observations)?;
    if losses.is_empty() {
        return Ok(SequenceLoss { loss_sum: 0.0, anchors: 0, grads: None, observations });
    }
    let flat: Vec<Var> = losses.iter().map(|&l| tape.reshape(l, &[1])).collect::<Result<_>>()?;
    let stacked = tape.concat(&flat, 0)?;
    let total = tape.sum(stacked)?;
    let grads = if with_grad {
        let mut buf = model.params().grad_buffer();
        tape.backward_into(total, &mut buf)?;
        Some(buf)
    } else {
        None
    };
    Ok(SequenceLoss { loss_sum: tape.scalar(total), anchors: losses.len(), grads, observations })
}

/// Mean loss per anchor over a dataset.
pub fn dataset_loss(model: &Model, data: &[EventSequence], min_history: usize) -> Result<f64> {
    let parts: Vec<SequenceLoss> = data
        .par_iter()
        .map(|s| sequence_loss(model, s, min_history, false))
        .collect::<Result<_>>()?;
    let anchors: usize = parts.iter().map(|p| p.anchors).sum();
    if anchors == 0 {
        return Err(Error::invalid("dataset has no training anchors"));
    }
    Ok(parts.iter().map(|p| p.loss_sum).sum::<f64>() / anchors as f64)
}

/// Mean number of horizon events per anchor, capped at K.
pub fn mean_target_length(data: &[EventSequence], horizon: f64, k: usize, min_history: usize) -> Result<f64> {
    let (mut total, mut count) = (0usize, 0usize);
    for seq in data {
        for (_, t) in extract_horizon_targets(seq, horizon, k, min_history)? {
            total += t.len();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total as f64 / count as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

impl LogRow {
    /// Row without the wall-clock column, which is the only nondeterministic field.
    pub fn deterministic(&self) -> (usize, u64, u64) {
        (self.epoch, self.train_loss.to_bits(), self.val_loss.to_bits())
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,wall_seconds\n");
    for r in rows {
        out.push_str(&format!("{},{:?},{:?},{:.3}\n", r.epoch, r.train_loss, r.val_loss, r.wall_seconds));
    }
    out
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub epochs_done: usize,
    pub adam: AdamState,
    pub best_val: Option<f64>,
    pub stale_epochs: usize,
    pub best_params: Option<ParamStore>,
    pub log: Vec<LogRow>,
}

/// A trained model with its presence calibration (DeTPP only).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub calibration: Option<CalibrationState>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model with the lowest validation loss.
    pub best: TrainedModel,
    /// Model after the last completed epoch.
    pub last: TrainedModel,
    pub resume: ResumeState,
    pub log: Vec<LogRow>,
    pub stopped_early: bool,
}

/// Initial model for `config`, with the presence prior estimated from `train`.
pub fn init_model(config: &TrainConfig, train: &[EventSequence]) -> Result<Model> {
    let prior = if config.method == Method::Detpp {
        let mean = mean_target_length(train, config.horizon, config.k_slots, config.min_history)?;
        Some((mean / config.k_slots as f64).min(0.5))
    } else {
        None
    };
    Model::new(config.encoder_config(), config.method, config.seed, prior)
}

pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn train(config: &TrainConfig, train_set: &[EventSequence], val_set: &[EventSequence]) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let model = init_model(config, train_set)?;
    let resume = ResumeState {
        epochs_done: 0,
        adam: AdamState::new(model.params()),
        best_val: None,
        stale_epochs: 0,
        best_params: None,
        log: Vec::new(),
    };
    resume_training(config, TrainedModel { model, calibration: None }, resume, train_set, val_set)
}

/// Continues from a saved state up to `config.epochs` total epochs.
pub fn resume_training(
    config: &TrainConfig,
    start: TrainedModel,
    state: ResumeState,
    train_set: &[EventSequence],
    val_set: &[EventSequence],
) -> Result<TrainOutcome> {
    config.validate()?;
    for seq in train_set.iter().chain(val_set) {
        seq.validate_labels(config.num_labels)?;
    }
    with_threads(config.threads, || run_epochs(config, start, state, train_set, val_set))?
}

fn run_epochs(
    config: &TrainConfig,
    start: TrainedModel,
    mut state: ResumeState,
    train_set: &[EventSequence],
    val_set: &[EventSequence],
) -> Result<TrainOutcome> {
    let mut model = start.model;
    let mut stopped_early = false;
    for epoch in state.epochs_done..config.epochs {
        if state.stale_epochs >= config.patience {
            stopped_early = true;
            break;
        }
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut anchors) = (0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let parts: Vec<SequenceLoss> = batch
                .par_iter()
                .map(|&i| sequence_loss(&model, &train_set[i], config.min_history, true))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged { epoch: epoch + 1, batch: b, message: format!("non-finite value in {op}") },
                    other => other,
                })?;
            let batch_anchors: usize = parts.iter().map(|p| p.anchors).sum();
            if batch_anchors == 0 {
                continue;
            }
            let batch_loss: f64 = parts.iter().map(|p| p.loss_sum).sum();
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, batch: b, message: "loss is not finite".into() });
            }
            let params = model.params_mut();
            params.zero_grads();
            for p in &parts {
                if let Some(g) = &p.grads {
                    params.accumulate(g, 1.0 / batch_anchors as f64);
                }
            }
            clip_gradients(params, config.grad_clip_norm);
            adam_step(params, &mut state.adam, config.learning_rate)?;
            params.zero_grads();
            loss_sum += batch_loss;
            anchors += batch_anchors;
        }
        let train_loss = if anchors == 0 { 0.0 } else { loss_sum / anchors as f64 };
        let val_loss = if val_set.is_empty() { train_loss } else { dataset_loss(&model, val_set, config.min_history)? };
        state.log.push(LogRow { epoch: epoch + 1, train_loss, val_loss, wall_seconds: clock.elapsed().as_secs_f64() });
        state.epochs_done = epoch + 1;
        if state.best_val.is_none_or(|b| val_loss < b) {
            state.best_val = Some(val_loss);
            state.stale_epochs = 0;
            state.best_params = Some(model.params().clone());
        } else {
            state.stale_epochs += 1;
        }
    }
    let best_model = match &state.best_params {
        Some(p) => Model::from_params(model.config().clone(), model.method(), p.clone())?,
        None => model.clone(),
    };
    let calibrated = config.method == Method::Detpp && state.epochs_done >= config.calibration_warmup;
    let (best_cal, last_cal) = if calibrated {
        (Some(calibrate(&best_model, train_set, config)?), Some(calibrate(&model, train_set, config)?))
    } else {
        (None, None)
    };
    let last = TrainedModel { model, calibration: last_cal };
    let best = TrainedModel { model: best_model, calibration: best_cal };
    Ok(TrainOutcome { best, last, log: state.log.clone(), resume: state, stopped_early })
}

/// Presence statistics of a frozen DeTPP model over every training anchor.
///
/// Scores observed while the parameters are still moving drift away from
/// what the final model produces, so the pass runs after training.
pub fn calibrate(model: &Model, train_set: &[EventSequence], config: &TrainConfig) -> Result<CalibrationState> {
    let parts: Vec<SequenceLoss> = train_set
        .par_iter()
        .map(|s| sequence_loss(model, s, config.min_history, false))
        .collect::<Result<_>>()?;
    let mut cal = CalibrationState::new(config.k_slots, config.reservoir_capacity, config.seed);
    for p in &parts {
        for &(j, o, m) in &p.observations {
            cal.observe(j, o, m);
        }
    }
    Ok(cal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(values.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_adam_is_a_no_op() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 0.1).unwrap();
        assert_eq!(p.iter().next().unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_sign() {
        let mut p = store(&[1.0, -2.0, 0.5]);
        p.iter_mut().next().unwrap().grad.data_mut().copy_from_slice(&[3.0, -0.02, 1e-3]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, 0.1).unwrap();
        let v = p.iter().next().unwrap().value.data().to_vec();
        // m_hat / sqrt(v_hat) = sign(g) on the first step (up to eps).
        assert!((v[0] - 0.9).abs() < 1e-7);
        assert!((v[1] + 1.9).abs() < 1e-6);
        assert!((v[2] - 0.4).abs() < 1e-4);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut p = store(&[1.5, -0.8]);
        let mut st = AdamState::new(&p);
        for _ in 0..2000 {
            let x = p.iter().next().unwrap().value.data().to_vec();
            // f = x0² + 3 x1²
            p.iter_mut().next().unwrap().grad.data_mut().copy_from_slice(&[2.0 * x[0], 6.0 * x[1]]);
            adam_step(&mut p, &mut st, 0.05).unwrap();
        }
        let x = p.iter().next().unwrap().value.data().to_vec();
        let f = x[0] * x[0] + 3.0 * x[1] * x[1];
        assert!(f < 1e-6, "f = {f}");
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut p = store(&[1.0, 2.0]);
        let mut st = AdamState::new(&store(&[1.0]));
        assert!(matches!(adam_step(&mut p, &mut st, 0.1), Err(Error::Shape { .. })));
    }

    #[test]
    fn clipping_rules() {
        let mut p = store(&[0.0, 0.0]);
        p.iter_mut().next().unwrap().grad.data_mut().copy_from_slice(&[0.3, 0.4]);
        assert_eq!(clip_gradients(&mut p, 1.0), 1.0);
        assert_eq!(p.iter().next().unwrap().grad.data(), &[0.3, 0.4]);
        p.iter_mut().next().unwrap().grad.data_mut().copy_from_slice(&[6.0, 8.0]);
        assert_eq!(clip_gradients(&mut p, 5.0), 0.5);
        assert_eq!(p.iter().next().unwrap().grad.data(), &[3.0, 4.0]);
    }

    #[test]
    fn csv_header() {
        let csv = log_to_csv(&[LogRow { epoch: 1, train_loss: 1.5, val_loss: 2.0, wall_seconds: 0.25 }]);
        assert_eq!(csv, "epoch,train_loss,val_loss,wall_seconds\n1,1.5,2.0,0.250\n");
    }
}
