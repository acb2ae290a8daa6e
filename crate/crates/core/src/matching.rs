//! Horizon matching loss: optimal assignment of ground-truth events to
//! prediction slots, plus the positional loss used by the next-K baseline.
//!
//! For an alignment σ the loss is
//!
//! ```text
//! Σ_i [ |t_i - t̂_σ(i)| - ln p̂_σ(i)(l_i) ] - Σ_{j∈σ} ln ô_j - Σ_{j∉σ} ln(1 - ô_j)
//! ```
//!
//! which equals `Σ_j -ln(1 - ô_j) + Σ_i C[i][σ(i)]` with the pairwise cost
//! `C[i][j] = |t_i - t̂_j| - ln p̂_j(l_i) - ln ô_j + ln(1 - ô_j)`. Only the
//! second sum depends on σ, so the optimal alignment is a rectangular
//! assignment problem on `C`.

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::model::{EventVars, SlotVars};

/// Dense row-major `rows x cols` matrix of assignment costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape { op: "cost_matrix", lhs: vec![rows, cols], rhs: vec![data.len()] });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Injective map from rows (targets) to columns (slots).
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `sigma[i]` is the column matched to row `i`.
    pub sigma: Vec<usize>,
    /// `matched[j]` is true when some row is assigned to column `j`.
    pub matched: Vec<bool>,
}

impl Assignment {
    fn new(sigma: Vec<usize>, cols: usize) -> Self {
        let mut matched = vec![false; cols];
        for &j in &sigma {
            matched[j] = true;
        }
        Self { sigma, matched }
    }

    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.sigma.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
///
/// Shortest augmenting paths with row and column potentials, `O(rows² cols)`.
/// Rows are inserted in order and ties go to the lowest column index, so the
/// result is deterministic.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::invalid(format!("assignment needs rows <= cols, got {n}x{m}")));
    }
    if cost.data.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("assignment costs must be finite"));
    }
    // 1-based, column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            sigma[owner[j] - 1] = j - 1;
        }
    }
    Ok(Assignment::new(sigma, m))
}

fn check_target(shifts: &[f64], labels: &[usize], k: usize, l: usize) -> Result<()> {
    if shifts.len() != labels.len() {
        return Err(Error::invalid("target shifts and labels differ in length"));
    }
    if shifts.len() > k {
        return Err(Error::invalid(format!("target has {} events but only {k} slots", shifts.len())));
    }
    if let Some(bad) = labels.iter().find(|&&x| x >= l) {
        return Err(Error::Validation(format!("target label {bad} outside vocabulary of {l}")));
    }
    Ok(())
}

/// Cost matrix `[T, K]` on the tape, plus `ln(1 - ô)` per slot.
fn cost_and_absence(tape: &mut Tape, shifts: &[f64], labels: &[usize], slots: &SlotVars) -> Result<(Option<Var>, Var)> {
    let k = tape.shape(slots.o_logit)[0];
    let l = tape.shape(slots.log_probs)[1];
    check_target(shifts, labels, k, l)?;
    let neg_o = tape.neg(slots.o_logit)?;
    let log_absent = tape.log_sigmoid(neg_o)?;
    let t = shifts.len();
    if t == 0 {
        return Ok((None, log_absent));
    }
    let log_present = tape.log_sigmoid(slots.o_logit)?;
    let presence_term = tape.sub(log_absent, log_present)?;
    let slot_idx: Vec<usize> = (0..t).flat_map(|_| 0..k).collect();
    let label_idx: Vec<usize> = (0..t).flat_map(|i| (0..k).map(move |j| j * l + labels[i])).collect();
    let target_rep: Vec<f64> = shifts.iter().flat_map(|&s| std::iter::repeat_n(s, k)).collect();
    let pred_t = tape.index_select(slots.t_shift, &slot_idx, &[t * k])?;
    let true_t = tape.leaf(Tensor::vector(target_rep))?;
    let dt = tape.sub(pred_t, true_t)?;
    let dt = tape.abs(dt)?;
    let lp = tape.index_select(slots.log_probs, &label_idx, &[t * k])?;
    let c = tape.sub(dt, lp)?;
    let pt = tape.index_select(presence_term, &slot_idx, &[t * k])?;
    let c = tape.add(c, pt)?;
    Ok((Some(tape.reshape(c, &[t, k])?), log_absent))
}

/// Pairwise costs `[T, K]` recorded on the tape so gradients reach every slot output.
///
/// `shifts` are target times relative to the anchor.
pub fn build_cost_matrix(tape: &mut Tape, shifts: &[f64], labels: &[usize], slots: &SlotVars) -> Result<Var> {
    let k = tape.shape(slots.o_logit)[0];
    match cost_and_absence(tape, shifts, labels, slots)? {
        (Some(c), _) => Ok(c),
        (None, _) => tape.leaf(Tensor::new(vec![0, k], vec![])?),
    }
}

/// Matching loss on the tape and the optimal alignment. The alignment is a
/// constant of the backward pass.
pub fn matching_loss(tape: &mut Tape, shifts: &[f64], labels: &[usize], slots: &SlotVars) -> Result<(Var, Assignment)> {
    let k = tape.shape(slots.o_logit)[0];
    let (cost, log_absent) = cost_and_absence(tape, shifts, labels, slots)?;
    let absent_sum = tape.sum(log_absent)?;
    let base = tape.neg(absent_sum)?;
    let Some(cost) = cost else {
        return Ok((base, Assignment::new(vec![], k)));
    };
    let t = shifts.len();
    let matrix = CostMatrix::new(t, k, tape.value(cost).to_vec())?;
    let assignment = hungarian(&matrix)?;
    let picked: Vec<usize> = assignment.sigma.iter().enumerate().map(|(i, &j)| i * k + j).collect();
    let matched = tape.index_select(cost, &picked, &[t])?;
    let matched = tape.sum(matched)?;
    Ok((tape.add(base, matched)?, assignment))
}

/// Absolute time error plus cross-entropy, slot `i` against target `i`.
/// Slots past the end of the target are ignored.
pub fn positional_loss(tape: &mut Tape, shifts: &[f64], labels: &[usize], preds: &EventVars) -> Result<Var> {
    let n = tape.shape(preds.t_shift)[0];
    let l = tape.shape(preds.log_probs)[1];
    let t = shifts.len().min(n);
    check_target(&shifts[..t], &labels[..t.min(labels.len())], n, l)?;
    if t == 0 {
        return tape.leaf(Tensor::scalar(0.0));
    }
    let idx: Vec<usize> = (0..t).collect();
    let pred_t = tape.index_select(preds.t_shift, &idx, &[t])?;
    let true_t = tape.leaf(Tensor::vector(shifts[..t].to_vec()))?;
    let dt = tape.sub(pred_t, true_t)?;
    let dt = tape.abs(dt)?;
    let label_idx: Vec<usize> = (0..t).map(|i| i * l + labels[i]).collect();
    let lp = tape.index_select(preds.log_probs, &label_idx, &[t])?;
    let per_event = tape.sub(dt, lp)?;
    tape.sum(per_event)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;

    fn slots(tape: &mut Tape, o: &[f64], t: &[f64], logits: &[Vec<f64>]) -> SlotVars {
        let k = o.len();
        let l = logits[0].len();
        let o_logit = tape.leaf(Tensor::vector(o.to_vec())).unwrap();
        let t_shift = tape.leaf(Tensor::vector(t.to_vec())).unwrap();
        let lg = tape.leaf(Tensor::new(vec![k, l], logits.concat()).unwrap()).unwrap();
        let log_probs = tape.log_softmax(lg).unwrap();
        SlotVars { o_logit, t_shift, log_probs }
    }

    #[test]
    fn cost_vanishes_for_perfect_half_present_slot() {
        let mut tape = Tape::new();
        let s = slots(&mut tape, &[0.0], &[1.5], &[vec![0.0, -800.0]]);
        let c = build_cost_matrix(&mut tape, &[1.5], &[0], &s).unwrap();
        assert_eq!(tape.value(c), &[0.0]);
    }

    #[test]
    fn cost_of_unit_time_error_and_coin_flip_label() {
        let mut tape = Tape::new();
        let s = slots(&mut tape, &[0.0], &[2.0], &[vec![0.0, 0.0]]);
        let c = build_cost_matrix(&mut tape, &[1.0], &[1], &s).unwrap();
        assert!((tape.value(c)[0] - (1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((tape.value(c)[0] - 1.6931).abs() < 1e-4);
    }

    #[test]
    fn hungarian_small_cases() {
        let m = CostMatrix::from_rows(&[vec![10.0, 1.0], vec![1.0, 10.0]]).unwrap();
        let a = hungarian(&m).unwrap();
        assert_eq!(a.sigma, vec![1, 0]);
        assert_eq!(a.cost(&m), 2.0);
        let diag = CostMatrix::from_rows(&[
            vec![0.0, 9.0, 9.0],
            vec![9.0, 0.0, 9.0],
            vec![9.0, 9.0, 0.0],
        ])
        .unwrap();
        assert_eq!(hungarian(&diag).unwrap().sigma, vec![0, 1, 2]);
        let empty = CostMatrix::new(0, 3, vec![]).unwrap();
        assert_eq!(hungarian(&empty).unwrap().matched, vec![false; 3]);
        assert!(hungarian(&CostMatrix::new(2, 1, vec![0.0, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn ties_prefer_lowest_slot() {
        let m = CostMatrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let a = hungarian(&m).unwrap();
        assert_eq!(a.sigma, vec![0, 1]);
        assert_eq!(a.matched, vec![true, true, false]);
    }

    #[test]
    fn empty_target_loss_is_absence_only() {
        let mut tape = Tape::new();
        let o = [0.3, -1.2, 2.0];
        let s = slots(&mut tape, &o, &[1.0, 2.0, 3.0], &[vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]]);
        let (loss, a) = matching_loss(&mut tape, &[], &[], &s).unwrap();
        let expected: f64 = o.iter().map(|x| -(1.0 - 1.0 / (1.0 + (-x).exp())).ln()).sum();
        assert!((tape.scalar(loss) - expected).abs() < 1e-12);
        assert!(a.sigma.is_empty());
    }

    #[test]
    fn perfect_single_slot_loss_vanishes() {
        let mut tape = Tape::new();
        let s = slots(&mut tape, &[40.0], &[0.7], &[vec![40.0, -40.0]]);
        let (loss, a) = matching_loss(&mut tape, &[0.7], &[0], &s).unwrap();
        assert!(tape.scalar(loss) < 1e-15);
        assert_eq!(a.sigma, vec![0]);
    }

    #[test]
    fn rejects_oversized_targets_and_bad_labels() {
        let mut tape = Tape::new();
        let s = slots(&mut tape, &[0.0], &[1.0], &[vec![0.0, 0.0]]);
        assert!(matching_loss(&mut tape, &[1.0, 2.0], &[0, 0], &s).is_err());
        assert!(matching_loss(&mut tape, &[1.0], &[2], &s).is_err());
    }

    fn event_vars(tape: &mut Tape, t: &[f64], probs: &[Vec<f64>]) -> EventVars {
        let l = probs[0].len();
        let t_shift = tape.leaf(Tensor::vector(t.to_vec())).unwrap();
        let logs: Vec<f64> = probs.iter().flatten().map(|p| p.ln()).collect();
        let lg = tape.leaf(Tensor::new(vec![t.len(), l], logs).unwrap()).unwrap();
        let log_probs = tape.log_softmax(lg).unwrap();
        EventVars { t_shift, log_probs }
    }

    #[test]
    fn positional_hand_case() {
        let mut tape = Tape::new();
        let p = event_vars(&mut tape, &[1.5, 2.0, 9.0], &[vec![0.8, 0.2], vec![1.0 - 1e-300, 1e-300], vec![0.5, 0.5]]);
        let loss = positional_loss(&mut tape, &[1.0, 2.0], &[0, 0], &p).unwrap();
        assert!((tape.scalar(loss) - (0.5 - 0.8f64.ln())).abs() < 1e-12);
        assert!((tape.scalar(loss) - 0.7231).abs() < 1e-4);
    }

    #[test]
    fn positional_empty_target_is_zero() {
        let mut tape = Tape::new();
        let p = event_vars(&mut tape, &[1.5], &[vec![0.5, 0.5]]);
        let loss = positional_loss(&mut tape, &[], &[], &p).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn positional_perfect_times_leave_cross_entropy() {
        let mut tape = Tape::new();
        let p = event_vars(&mut tape, &[1.0, 3.0], &[vec![0.6, 0.4], vec![0.3, 0.7]]);
        let loss = positional_loss(&mut tape, &[1.0, 3.0], &[0, 1], &p).unwrap();
        let ce = -(0.6f64.ln()) - 0.7f64.ln();
        assert!((tape.scalar(loss) - ce).abs() < 1e-12);
    }
}
