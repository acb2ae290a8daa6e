//! Synthetic event-stream generators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::{round_timestamp, Event, EventSequence};

/// Independent RNG stream for one sequence.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Multivariate Hawkes process with an exponential kernel.
///
/// `alpha[src][dst]` is the jump in the intensity of label `dst` caused by an
/// event of label `src`.
#[derive(Clone, Debug, PartialEq)]
pub struct HawkesSpec {
    num_labels: usize,
    mu: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    beta: f64,
    t_max: f64,
    seed: u64,
}

impl HawkesSpec {
    pub fn new(
        mu: Vec<f64>,
        alpha: Vec<Vec<f64>>,
        beta: f64,
        t_max: f64,
        seed: u64,
    ) -> Result<Self> {
        let num_labels = mu.len();
        if num_labels == 0 {
            return Err(Error::invalid("hawkes: at least one label required"));
        }
        if alpha.len() != num_labels || alpha.iter().any(|row| row.len() != num_labels) {
            return Err(Error::invalid(format!(
                "hawkes: alpha must be {num_labels}x{num_labels}"
            )));
        }
        let nonneg = |x: &f64| x.is_finite() && *x >= 0.0;
        if !mu.iter().all(nonneg) || !alpha.iter().flatten().all(nonneg) {
            return Err(Error::invalid("hawkes: mu and alpha must be finite and non-negative"));
        }
        if !(beta > 0.0 && beta.is_finite()) || !(t_max > 0.0 && t_max.is_finite()) {
            return Err(Error::invalid("hawkes: beta and t_max must be positive"));
        }
        let max_row = alpha
            .iter()
            .map(|row| row.iter().sum::<f64>())
            .fold(0.0, f64::max);
        if max_row / beta >= 1.0 {
            return Err(Error::invalid(format!(
                "hawkes: supercritical kernel (max row sum / beta = {:.4} >= 1)",
                max_row / beta
            )));
        }
        Ok(Self { num_labels, mu, alpha, beta, t_max, seed })
    }

    /// Homogeneous Poisson process with equal per-label rates.
    pub fn poisson(num_labels: usize, rate: f64, t_max: f64, seed: u64) -> Result<Self> {
        Self::new(
            vec![rate; num_labels],
            vec![vec![0.0; num_labels]; num_labels],
            1.0,
            t_max,
            seed,
        )
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    fn sample_one(&self, id: String, rng: &mut ChaCha8Rng) -> EventSequence {
        let mut excitation = vec![0.0; self.num_labels];
        let mut events: Vec<Event> = Vec::new();
        let mut t = 0.0;
        loop {
            // Intensity only decays between events, so the current total bounds it.
            let bound: f64 = self.mu.iter().zip(&excitation).map(|(m, s)| m + s).sum();
            if bound <= 0.0 {
                break;
            }
            let wait: f64 = Exp::new(bound).expect("positive rate").sample(rng);
            t += wait;
            if t > self.t_max {
                break;
            }
            let decay = (-self.beta * wait).exp();
            excitation.iter_mut().for_each(|s| *s *= decay);
            let intensities: Vec<f64> =
                self.mu.iter().zip(&excitation).map(|(m, s)| m + s).collect();
            let total: f64 = intensities.iter().sum();
            if rng.random::<f64>() * bound > total {
                continue;
            }
            let stamp = round_timestamp(t);
            if events.last().is_some_and(|e| stamp <= e.t) || stamp > self.t_max {
                continue;
            }
            let label = pick_weighted(&intensities, total, rng);
            for (s, a) in excitation.iter_mut().zip(&self.alpha[label]) {
                *s += a;
            }
            events.push(Event::new(stamp, label));
        }
        EventSequence::new(id, events).expect("thinning yields increasing times")
    }
}

fn pick_weighted(weights: &[f64], total: f64, rng: &mut impl Rng) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Draws sequences by Ogata thinning; sequence `i` uses RNG stream `i`.
pub fn generate_hawkes(spec: &HawkesSpec, n_sequences: usize) -> Vec<EventSequence> {
    (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(spec.seed, i as u64);
            spec.sample_one(format!("hawkes-{i}"), &mut rng)
        })
        .collect()
}

/// Markov chain over labels with label-dependent exponential gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovBurstSpec {
    pub num_labels: usize,
    pub t_max: f64,
    pub seed: u64,
    /// When set, every row keeps `self_prob` on the diagonal and spreads the
    /// rest uniformly. Otherwise rows are drawn at random from the seed.
    pub self_prob: Option<f64>,
}

impl MarkovBurstSpec {
    pub fn new(num_labels: usize, t_max: f64, seed: u64) -> Self {
        Self { num_labels, t_max, seed, self_prob: None }
    }

    fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::invalid("markov bursts need at least 2 labels"));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::invalid("t_max must be positive"));
        }
        if let Some(p) = self.self_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("self_prob {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Row-stochastic label transition matrix.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        let l = self.num_labels;
        if let Some(p) = self.self_prob {
            let off = (1.0 - p) / (l - 1) as f64;
            return (0..l)
                .map(|i| (0..l).map(|j| if i == j { p } else { off }).collect())
                .collect();
        }
        let mut rng = stream_rng(self.seed, u64::MAX);
        (0..l)
            .map(|_| {
                // Squared exponentials give peaked rows, so transitions are learnable.
                let raw: Vec<f64> = (0..l)
                    .map(|_| {
                        let e: f64 = Exp1.sample(&mut rng);
                        e * e
                    })
                    .collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / sum).collect()
            })
            .collect()
    }

    /// Rate of the exponential gap that follows an event of each label.
    pub fn gap_rates(&self) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, u64::MAX - 1);
        (0..self.num_labels)
            .map(|_| (rng.random_range(-1.0..1.0f64) * 3f64.ln()).exp())
            .collect()
    }
}

pub fn generate_markov_bursts(spec: &MarkovBurstSpec, n_sequences: usize) -> Result<Vec<EventSequence>> {
    spec.validate()?;
    let transitions = spec.transition_matrix();
    let gaps: Vec<Exp<f64>> = spec
        .gap_rates()
        .into_iter()
        .map(|r| Exp::new(r).expect("positive rate"))
        .collect();
    Ok((0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(spec.seed, i as u64);
            let mut label = rng.random_range(0..spec.num_labels);
            let mut t = 0.0;
            let mut events: Vec<Event> = Vec::new();
            loop {
                t += gaps[label].sample(&mut rng);
                if t > spec.t_max {
                    break;
                }
                let stamp = round_timestamp(t);
                if events.last().is_some_and(|e| stamp <= e.t) || stamp > spec.t_max {
                    continue;
                }
                events.push(Event::new(stamp, label));
                label = pick_weighted(&transitions[label], 1.0, &mut rng);
            }
            EventSequence::new(format!("markov-{i}"), events).expect("increasing times")
        })
        .collect())
}

/// Disjoint train/val/test partition after a seeded shuffle.
pub fn split_dataset(
    sequences: Vec<EventSequence>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<EventSequence>, Vec<EventSequence>, Vec<EventSequence>)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = sequences.len();
    let n_val = ((b * n as f64).round() as usize).max(1);
    let n_test = ((c * n as f64).round() as usize).max(1);
    if n < 3 || n_val + n_test >= n {
        return Err(Error::invalid(format!("cannot split {n} sequences into three parts")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 0));
    let mut slots: Vec<Option<EventSequence>> = sequences.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<EventSequence> {
        idx.iter().map(|&i| slots[i].take().expect("each index once")).collect()
    };
    let n_train = n - n_val - n_test;
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}
