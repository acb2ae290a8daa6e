//! Per-slot presence thresholds from matching frequencies.
//!
//! During training each slot records how often it was matched and keeps a
//! uniform reservoir sample of its presence scores. The threshold for slot
//! `j` is the `(1 - m_j)` quantile of its reservoir, so that at inference a
//! slot fires about as often as it was matched during training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_RESERVOIR_CAPACITY: usize = 1024;
const FORMAT_TAG: &str = "CAL1";

#[derive(Clone, Debug, PartialEq)]
struct SlotStats {
    count: u64,
    matched: u64,
    reservoir: Vec<f64>,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationState {
    capacity: usize,
    seed: u64,
    slots: Vec<SlotStats>,
}

/// Lower-interpolated quantile of sorted data: element `floor(q * (n - 1))`.
pub fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx]
}

impl CalibrationState {
    pub fn new(num_slots: usize, capacity: usize, seed: u64) -> Self {
        let slots = (0..num_slots)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(j as u64);
                SlotStats { count: 0, matched: 0, reservoir: Vec::new(), rng }
            })
            .collect();
        Self { capacity: capacity.max(1), seed, slots }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Records one training-time presence score for `slot` and whether the
    /// slot was matched.
    pub fn observe(&mut self, slot: usize, o_hat: f64, matched: bool) {
        let capacity = self.capacity;
        let s = &mut self.slots[slot];
        s.count += 1;
        s.matched += u64::from(matched);
        if s.reservoir.len() < capacity {
            s.reservoir.push(o_hat);
        } else {
            let r = s.rng.random_range(0..s.count);
            if (r as usize) < capacity {
                s.reservoir[r as usize] = o_hat;
            }
        }
    }

    pub fn observations(&self, slot: usize) -> u64 {
        self.slots[slot].count
    }

    /// Fraction of observations in which `slot` was matched.
    pub fn match_rate(&self, slot: usize) -> f64 {
        let s = &self.slots[slot];
        if s.count == 0 {
            0.0
        } else {
            s.matched as f64 / s.count as f64
        }
    }

    pub fn reservoir(&self, slot: usize) -> &[f64] {
        &self.slots[slot].reservoir
    }

    pub fn is_calibrated(&self) -> bool {
        !self.slots.is_empty() && self.slots.iter().all(|s| !s.reservoir.is_empty())
    }

    pub fn quantile(&self, slot: usize, q: f64) -> Result<f64> {
        let r = &self.slots[slot].reservoir;
        if r.is_empty() {
            return Err(Error::Uncalibrated(format!("slot {slot} has no observations")));
        }
        let mut sorted = r.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(lower_quantile(&sorted, q))
    }

    /// Presence threshold of `slot`.
    pub fn threshold(&self, slot: usize) -> Result<f64> {
        self.quantile(slot, 1.0 - self.match_rate(slot))
    }

    pub fn thresholds(&self) -> Result<Vec<f64>> {
        if self.slots.is_empty() {
            return Err(Error::Uncalibrated("no slots".into()));
        }
        (0..self.slots.len()).map(|j| self.threshold(j)).collect()
    }

    /// Text encoding used inside checkpoints. Values use Rust's shortest
    /// round-trip float formatting, so decoding is exact.
    pub fn serialize(&self) -> String {
        let mut out = format!("{FORMAT_TAG} {} {} {}\n", self.capacity, self.seed, self.slots.len());
        for s in &self.slots {
            out.push_str(&format!(
                "{} {} {} {}",
                s.count,
                s.matched,
                s.rng.get_word_pos(),
                s.reservoir.len()
            ));
            for v in &s.reservoir {
                out.push_str(&format!(" {v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn deserialize(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("calibration section: {m}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split_whitespace().collect();
        if header.first() != Some(&FORMAT_TAG) {
            return Err(bad(&format!(
                "version mismatch: expected {FORMAT_TAG}, found {}",
                header.first().unwrap_or(&"nothing")
            )));
        }
        if header.len() != 4 {
            return Err(bad("malformed header"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(&format!("bad integer `{s}`")));
        let capacity = num(header[1])? as usize;
        let seed = num(header[2])?;
        let num_slots = num(header[3])? as usize;
        let mut state = Self::new(num_slots, capacity, seed);
        for s in state.slots.iter_mut() {
            let fields: Vec<&str> = lines.next().ok_or_else(|| bad("missing slot line"))?.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(bad("short slot line"));
            }
            s.count = num(fields[0])?;
            s.matched = num(fields[1])?;
            let pos: u128 = fields[2].parse().map_err(|_| bad("bad rng position"))?;
            s.rng.set_word_pos(pos);
            let len = num(fields[3])? as usize;
            if fields.len() != 4 + len || len > capacity || s.matched > s.count {
                return Err(bad("inconsistent slot line"));
            }
            s.reservoir = fields[4..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad(&format!("bad value `{v}`"))))
                .collect::<Result<_>>()?;
        }
        Ok(state)
    }
}
