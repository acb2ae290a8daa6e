//! Event sequences, the JSONL dataset format and horizon-target extraction.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Significant digits kept when timestamps are written to disk.
pub const TIMESTAMP_SIG_DIGITS: usize = 9;

/// A single (timestamp, label) observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t: f64,
    pub label: usize,
}

impl Event {
    pub fn new(t: f64, label: usize) -> Self {
        Self { t, label }
    }
}

/// A strictly time-ordered list of events with an opaque identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    id: String,
    events: Vec<Event>,
}

impl EventSequence {
    /// Builds a sequence, rejecting non-finite or non-increasing timestamps.
    pub fn new(id: impl Into<String>, events: Vec<Event>) -> Result<Self> {
        let id = id.into();
        for (i, e) in events.iter().enumerate() {
            if !e.t.is_finite() {
                return Err(Error::Validation(format!(
                    "sequence `{id}`: event {i} has non-finite timestamp"
                )));
            }
            if i > 0 && e.t <= events[i - 1].t {
                return Err(Error::Validation(format!(
                    "sequence `{id}`: timestamps not strictly increasing at event {i} ({} after {})",
                    e.t,
                    events[i - 1].t
                )));
            }
        }
        Ok(Self { id, events })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks every label against the vocabulary size.
    pub fn validate_labels(&self, num_labels: usize) -> Result<()> {
        match self.events.iter().position(|e| e.label >= num_labels) {
            Some(i) => Err(Error::Validation(format!(
                "sequence `{}`: event {i} has label {} but the vocabulary size is {num_labels}",
                self.id, self.events[i].label
            ))),
            None => Ok(()),
        }
    }

    /// Events strictly after `anchor` and no later than `anchor + horizon`.
    pub fn window(&self, anchor_index: usize, horizon: f64) -> &[Event] {
        let anchor = self.events[anchor_index].t;
        let start = anchor_index + 1;
        let len = self.events[start..]
            .iter()
            .take_while(|e| in_horizon(anchor, horizon, e.t))
            .count();
        &self.events[start..start + len]
    }
}

/// Membership test for the half-open horizon window `(anchor, anchor + horizon]`.
#[inline]
pub fn in_horizon(anchor: f64, horizon: f64, t: f64) -> bool {
    t > anchor && t <= anchor + horizon
}

/// Rounds to [`TIMESTAMP_SIG_DIGITS`] significant digits, the on-disk precision.
pub fn round_timestamp(t: f64) -> f64 {
    if t == 0.0 || !t.is_finite() {
        return t;
    }
    format!("{:.*e}", TIMESTAMP_SIG_DIGITS - 1, t)
        .parse()
        .expect("formatted float parses")
}

/// Ground-truth events of one forecast window.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonTarget {
    pub anchor: f64,
    pub horizon: f64,
    pub events: Vec<Event>,
}

impl HorizonTarget {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time offsets of the target events relative to the anchor.
    pub fn shifts(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t - self.anchor).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.label).collect()
    }
}

/// One target per anchor index `n >= min_history - 1`, each holding the at
/// most `max_events` earliest events in `(t_n, t_n + horizon]`.
///
/// Anchors whose window is empty are kept.
pub fn extract_horizon_targets(
    seq: &EventSequence,
    horizon: f64,
    max_events: usize,
    min_history: usize,
) -> Result<Vec<(usize, HorizonTarget)>> {
    if !(horizon > 0.0) {
        return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
    }
    if max_events == 0 || min_history == 0 {
        return Err(Error::invalid("max_events and min_history must be at least 1"));
    }
    let events = seq.events();
    Ok((min_history - 1..events.len())
        .map(|n| {
            let window = seq.window(n, horizon);
            let take = window.len().min(max_events);
            let target = HorizonTarget {
                anchor: events[n].t,
                horizon,
                events: window[..take].to_vec(),
            };
            (n, target)
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    id: String,
    events: Vec<(f64, u64)>,
}

/// Reads a JSONL dataset, validating ordering and labels against `num_labels`.
pub fn load_sequences(path: impl AsRef<Path>, num_labels: usize) -> Result<Vec<EventSequence>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SequenceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let events = record
            .events
            .into_iter()
            .map(|(t, l)| Event::new(t, l as usize))
            .collect();
        let seq = EventSequence::new(record.id, events)?;
        seq.validate_labels(num_labels)?;
        out.push(seq);
    }
    Ok(out)
}

/// Writes sequences as JSONL with timestamps rounded to nine significant digits.
pub fn save_sequences(sequences: &[EventSequence], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    for seq in sequences {
        let record = SequenceRecord {
            id: seq.id.clone(),
            events: seq
                .events
                .iter()
                .map(|e| (round_timestamp(e.t), e.label as u64))
                .collect(),
        };
        serde_json::to_writer(&mut writer, &record).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
