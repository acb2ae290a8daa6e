//! GRU encoder and the three prediction heads.
//!
//! All methods share one encoder; they differ only in the head attached to
//! the hidden state and in the loss used for training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event::Event;
use crate::grad::{stable_sigmoid, stable_softplus, ParamId, ParamStore, Tape, Tensor, Var};

/// Training method, which selects the head and loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// K parallel slots trained with the matching loss.
    Detpp,
    /// Next-event head trained with absolute time error plus cross-entropy.
    MaeCe,
    /// K positional slots trained against the next K events.
    MaeCeK,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Detpp, Method::MaeCe, Method::MaeCeK];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Detpp => "detpp",
            Method::MaeCe => "mae_ce",
            Method::MaeCeK => "mae_ce_k",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detpp" => Ok(Method::Detpp),
            "mae_ce" => Ok(Method::MaeCe),
            "mae_ce_k" => Ok(Method::MaeCeK),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected detpp, mae_ce or mae_ce_k)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_labels: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub k_slots: usize,
    pub horizon: f64,
}

impl EncoderConfig {
    pub fn new(num_labels: usize, k_slots: usize, horizon: f64) -> Self {
        Self { num_labels, embed_dim: 16, hidden_dim: 64, k_slots, horizon }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.k_slots == 0 {
            return Err(Error::invalid("model dimensions and K must be at least 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    /// Factor applied to softplus outputs of horizon heads; a zero raw output
    /// maps to half the horizon.
    pub fn horizon_time_scale(&self) -> f64 {
        0.5 * self.horizon / std::f64::consts::LN_2
    }

    pub fn head_width(&self, method: Method) -> usize {
        let (k, l) = (self.k_slots, self.num_labels);
        match method {
            Method::Detpp => k * (2 + l),
            Method::MaeCe => 1 + l,
            Method::MaeCeK => k * (1 + l),
        }
    }
}

/// One DeTPP slot: presence logit, time offset from the anchor and label logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPrediction {
    pub o_logit: f64,
    pub t_shift: f64,
    pub label_logits: Vec<f64>,
}

impl SlotPrediction {
    pub fn presence(&self) -> f64 {
        stable_sigmoid(self.o_logit)
    }

    pub fn label_probs(&self) -> Vec<f64> {
        softmax(&self.label_logits)
    }

    pub fn argmax_label(&self) -> usize {
        argmax(&self.label_logits)
    }
}

/// The K slots predicted for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub slots: Vec<SlotPrediction>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// A single predicted event (next-event and next-K heads).
#[derive(Clone, Debug, PartialEq)]
pub struct EventPrediction {
    pub t_shift: f64,
    pub label_logits: Vec<f64>,
}

impl EventPrediction {
    pub fn argmax_label(&self) -> usize {
        argmax(&self.label_logits)
    }

    /// Probability assigned to the argmax label.
    pub fn confidence(&self) -> f64 {
        let p = softmax(&self.label_logits);
        p[argmax(&p)]
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Tape handles for one DeTPP anchor.
#[derive(Clone, Copy, Debug)]
pub struct SlotVars {
    /// `[K]`
    pub o_logit: Var,
    /// `[K]`, already scaled to time units.
    pub t_shift: Var,
    /// `[K, L]`
    pub log_probs: Var,
}

/// Tape handles for one next-event or next-K anchor.
#[derive(Clone, Copy, Debug)]
pub struct EventVars {
    /// `[n]`
    pub t_shift: Var,
    /// `[n, L]`
    pub log_probs: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ParamIds {
    embedding: ParamId,
    w_input: ParamId,
    b_input: ParamId,
    w_hidden: ParamId,
    b_hidden: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Parameters of the encoder on a tape, reused across GRU steps.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    embedding: Var,
    w_input: Var,
    b_input: Var,
    w_hidden: Var,
    b_hidden: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: EncoderConfig,
    method: Method,
    params: ParamStore,
    ids: ParamIds,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `ln(p / (1 - p))`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Model {
    /// Randomly initialized model. For DeTPP, `presence_prior` (the expected
    /// fraction of slots carrying an event) sets the presence-logit bias.
    pub fn new(config: EncoderConfig, method: Method, seed: u64, presence_prior: Option<f64>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, e, h) = (config.num_labels, config.embed_dim, config.hidden_dim);
        let gate = 1.0 / (h as f64).sqrt();
        let mut params = ParamStore::new();
        let embedding = params.add("encoder.embedding", uniform(&mut rng, &[l, e], 1.0));
        let w_input = params.add("encoder.w_input", uniform(&mut rng, &[e + 1, 3 * h], gate));
        let b_input = params.add("encoder.b_input", uniform(&mut rng, &[1, 3 * h], gate));
        let w_hidden = params.add("encoder.w_hidden", uniform(&mut rng, &[h, 3 * h], gate));
        let b_hidden = params.add("encoder.b_hidden", uniform(&mut rng, &[1, 3 * h], gate));
        let width = config.head_width(method);
        let head_w = params.add("head.weight", uniform(&mut rng, &[h, width], gate));
        let mut bias = Tensor::zeros(&[1, width]);
        if method == Method::Detpp {
            let prior = presence_prior.unwrap_or(0.5).clamp(1e-3, 0.5);
            bias.data_mut()[..config.k_slots].iter_mut().for_each(|b| *b = logit(prior));
        }
        let head_b = params.add("head.bias", bias);
        let ids = ParamIds { embedding, w_input, b_input, w_hidden, b_hidden, head_w, head_b };
        Ok(Self { config, method, params, ids })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: EncoderConfig, method: Method, params: ParamStore) -> Result<Self> {
        let template = Model::new(config.clone(), method, 0, None)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder_vars(&self, tape: &mut Tape) -> Result<EncoderVars> {
        Ok(EncoderVars {
            embedding: tape.param(&self.params, self.ids.embedding)?,
            w_input: tape.param(&self.params, self.ids.w_input)?,
            b_input: tape.param(&self.params, self.ids.b_input)?,
            w_hidden: tape.param(&self.params, self.ids.w_hidden)?,
            b_hidden: tape.param(&self.params, self.ids.b_hidden)?,
        })
    }

    fn embed_rows(&self, tape: &mut Tape, enc: &EncoderVars, labels: &[usize]) -> Result<Var> {
        let e = self.config.embed_dim;
        let idx: Vec<usize> = labels.iter().flat_map(|&l| l * e..(l + 1) * e).collect();
        tape.index_select(enc.embedding, &idx, &[labels.len(), e])
    }

    fn repeat_rows(tape: &mut Tape, row: Var, n: usize) -> Result<Var> {
        let width = tape.shape(row)[1];
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..width).collect();
        tape.index_select(row, &idx, &[n, width])
    }

    /// Input-side gate pre-activations for a batch of steps, `[n, 3H]`.
    fn input_gates(&self, tape: &mut Tape, enc: &EncoderVars, labels: &[usize], gaps: &[f64]) -> Result<Var> {
        let n = labels.len();
        let emb = self.embed_rows(tape, enc, labels)?;
        let dt: Vec<f64> = gaps.iter().map(|g| g.ln_1p()).collect();
        let dt = tape.leaf(Tensor::new(vec![n, 1], dt)?)?;
        let x = tape.concat(&[emb, dt], 1)?;
        let gx = tape.matmul(x, enc.w_input)?;
        let bias = Self::repeat_rows(tape, enc.b_input, n)?;
        tape.add(gx, bias)
    }

    /// One GRU update from input pre-activations `gx` (`[1, 3H]`) and state `h` (`[1, H]`).
    pub fn gru_step(&self, tape: &mut Tape, enc: &EncoderVars, gx: Var, h: Var) -> Result<Var> {
        let hd = self.config.hidden_dim;
        let gh = tape.matmul(h, enc.w_hidden)?;
        let gh = tape.add(gh, enc.b_hidden)?;
        let part = |tape: &mut Tape, v: Var, i: usize| tape.slice(v, i * hd, &[1, hd]);
        let (xr, hr) = (part(tape, gx, 0)?, part(tape, gh, 0)?);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;
        let (xz, hz) = (part(tape, gx, 1)?, part(tape, gh, 1)?);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;
        let (xn, hn) = (part(tape, gx, 2)?, part(tape, gh, 2)?);
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n)?;
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    /// Hidden states after each event, `[N, H]`. Row `n` depends only on
    /// events `0..=n`; the step input is the label embedding and
    /// `ln(1 + dt)` with `dt = 0` for the first event.
    pub fn encode(&self, tape: &mut Tape, enc: &EncoderVars, events: &[Event]) -> Result<Var> {
        if events.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        let labels: Vec<usize> = events.iter().map(|e| e.label).collect();
        let gaps: Vec<f64> = std::iter::once(0.0)
            .chain(events.windows(2).map(|w| w[1].t - w[0].t))
            .collect();
        let gx_all = self.input_gates(tape, enc, &labels, &gaps)?;
        let mut h = tape.leaf(Tensor::zeros(&[1, self.config.hidden_dim]))?;
        let mut states = Vec::with_capacity(events.len());
        for n in 0..events.len() {
            let gx = tape.row(gx_all, n)?;
            h = self.gru_step(tape, enc, gx, h)?;
            states.push(h);
        }
        tape.concat(&states, 0)
    }

    /// Advances a state by one observed (label, gap) pair.
    pub fn advance(&self, tape: &mut Tape, enc: &EncoderVars, h: Var, label: usize, gap: f64) -> Result<Var> {
        let gx = self.input_gates(tape, enc, &[label], &[gap])?;
        self.gru_step(tape, enc, gx, h)
    }

    /// Affine head applied to every row of `hidden` (`[N, H]` -> `[N, D]`).
    pub fn head(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let w = tape.param(&self.params, self.ids.head_w)?;
        let b = tape.param(&self.params, self.ids.head_b)?;
        let n = tape.shape(hidden)[0];
        let out = tape.matmul(hidden, w)?;
        let bias = Self::repeat_rows(tape, b, n)?;
        tape.add(out, bias)
    }

    /// Encoder followed by the head: `(hidden [N, H], outputs [N, D])`.
    pub fn forward(&self, tape: &mut Tape, events: &[Event]) -> Result<(Var, Var)> {
        let enc = self.encoder_vars(tape)?;
        let hidden = self.encode(tape, &enc, events)?;
        let out = self.head(tape, hidden)?;
        Ok((hidden, out))
    }

    /// DeTPP slot views of row `row` of the head output.
    pub fn detpp_vars(&self, tape: &mut Tape, out: Var, row: usize) -> Result<SlotVars> {
        self.expect(Method::Detpp)?;
        let (k, l) = (self.config.k_slots, self.config.num_labels);
        let base = row * self.config.head_width(Method::Detpp);
        let o_logit = tape.slice(out, base, &[k])?;
        let raw = tape.slice(out, base + k, &[k])?;
        let t = tape.softplus(raw)?;
        let t_shift = tape.scale(t, self.config.horizon_time_scale())?;
        let logits = tape.slice(out, base + 2 * k, &[k, l])?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(SlotVars { o_logit, t_shift, log_probs })
    }

    /// Next-event (one slot) or next-K (K slots) views of row `row`.
    pub fn event_vars(&self, tape: &mut Tape, out: Var, row: usize) -> Result<EventVars> {
        let l = self.config.num_labels;
        let (n, scale) = match self.method {
            Method::MaeCe => (1, None),
            Method::MaeCeK => (self.config.k_slots, Some(self.config.horizon_time_scale())),
            Method::Detpp => return Err(Error::invalid("event_vars needs a next-event or next-K model")),
        };
        let base = row * self.config.head_width(self.method);
        let raw = tape.slice(out, base, &[n])?;
        let mut t_shift = tape.softplus(raw)?;
        if let Some(c) = scale {
            t_shift = tape.scale(t_shift, c)?;
        }
        let logits = tape.slice(out, base + n, &[n, l])?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(EventVars { t_shift, log_probs })
    }

    fn expect(&self, method: Method) -> Result<()> {
        if self.method != method {
            return Err(Error::invalid(format!("operation needs a {method} model, this is {}", self.method)));
        }
        Ok(())
    }

    /// Decodes one DeTPP head row.
    pub fn decode_detpp(&self, row: &[f64]) -> PredictionSet {
        let (k, l) = (self.config.k_slots, self.config.num_labels);
        let scale = self.config.horizon_time_scale();
        let slots = (0..k)
            .map(|j| SlotPrediction {
                o_logit: row[j],
                t_shift: scale * stable_softplus(row[k + j]),
                label_logits: row[2 * k + j * l..2 * k + (j + 1) * l].to_vec(),
            })
            .collect();
        PredictionSet { slots }
    }

    /// Decodes one next-event or next-K head row.
    pub fn decode_events(&self, row: &[f64]) -> Vec<EventPrediction> {
        let l = self.config.num_labels;
        let (n, scale) = match self.method {
            Method::MaeCeK => (self.config.k_slots, self.config.horizon_time_scale()),
            _ => (1, 1.0),
        };
        (0..n)
            .map(|j| {
                let t = stable_softplus(row[j]);
                EventPrediction {
                    t_shift: if n == 1 { t } else { scale * t },
                    label_logits: row[n + j * l..n + (j + 1) * l].to_vec(),
                }
            })
            .collect()
    }

    /// Head rows for every event position of a sequence.
    pub fn head_rows(&self, events: &[Event]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let (_, out) = self.forward(&mut tape, events)?;
        let width = self.config.head_width(self.method);
        Ok(tape.value(out).chunks(width).map(<[f64]>::to_vec).collect())
    }

    /// DeTPP predictions at every event position.
    pub fn predict_sets(&self, events: &[Event]) -> Result<Vec<PredictionSet>> {
        self.expect(Method::Detpp)?;
        Ok(self.head_rows(events)?.iter().map(|r| self.decode_detpp(r)).collect())
    }
}
