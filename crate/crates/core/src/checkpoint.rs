//! Versioned plain-text checkpoint format.
//!
//! ```text
//! DETPP1
//! method <detpp|mae_ce|mae_ce_k>
//! num_labels <L>  embed_dim <E>  hidden_dim <H>  k_slots <K>  horizon <f64>   (one per line)
//! params <count>
//! param <name> <rank> <dims...>
//! <values...>
//! calibration <line count> | calibration none
//! resume none | resume <epochs_done> <stale_epochs> <best_val|none>
//!   (adam, best params and log blocks follow)
//! end
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting.

use std::fs;
use std::path::Path;

use crate::calibrate::CalibrationState;
use crate::error::{Error, Result};
use crate::grad::{ParamStore, Tensor};
use crate::model::{EncoderConfig, Method, Model};
use crate::train::{AdamState, LogRow, ResumeState, TrainedModel};

pub const MAGIC: &str = "DETPP1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub trained: TrainedModel,
    pub resume: Option<ResumeState>,
}

fn floats(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn write_params(out: &mut String, params: &ParamStore) {
    out.push_str(&format!("params {}\n", params.len()));
    for p in params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        out.push_str(&format!("param {} {} {}\n", p.name, dims.len(), dims.join(" ")));
        out.push_str(&floats(p.value.data()));
        out.push('\n');
    }
}

fn write_calibration(out: &mut String, cal: Option<&CalibrationState>) {
    match cal {
        None => out.push_str("calibration none\n"),
        Some(c) => {
            let text = c.serialize();
            out.push_str(&format!("calibration {}\n", text.lines().count()));
            out.push_str(&text);
        }
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let model = &self.trained.model;
        let cfg = model.config();
        let mut out = format!("{MAGIC}\n");
        out.push_str(&format!("method {}\n", model.method()));
        out.push_str(&format!("num_labels {}\n", cfg.num_labels));
        out.push_str(&format!("embed_dim {}\n", cfg.embed_dim));
        out.push_str(&format!("hidden_dim {}\n", cfg.hidden_dim));
        out.push_str(&format!("k_slots {}\n", cfg.k_slots));
        out.push_str(&format!("horizon {:?}\n", cfg.horizon));
        write_params(&mut out, model.params());
        write_calibration(&mut out, self.trained.calibration.as_ref());
        match &self.resume {
            None => out.push_str("resume none\n"),
            Some(r) => {
                let best = r.best_val.map_or("none".to_string(), |v| format!("{v:?}"));
                out.push_str(&format!("resume {} {} {}\n", r.epochs_done, r.stale_epochs, best));
                out.push_str(&format!("adam {} {}\n", r.adam.step, r.adam.m.len()));
                for (m, v) in r.adam.m.iter().zip(&r.adam.v) {
                    out.push_str(&format!("{}\n{}\n", floats(m), floats(v)));
                }
                match &r.best_params {
                    None => out.push_str("best none\n"),
                    Some(p) => {
                        out.push_str("best some\n");
                        write_params(&mut out, p);
                    }
                }
                out.push_str(&format!("log {}\n", r.log.len()));
                for row in &r.log {
                    out.push_str(&format!("{} {:?} {:?} {:?}\n", row.epoch, row.train_loss, row.val_loss, row.wall_seconds));
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Reader { lines: text.lines().collect(), pos: 0 };
        let magic = r.next()?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic `{magic}`, expected {MAGIC}")));
        }
        let method: Method = r.keyed("method")?.parse()?;
        let num_labels = r.keyed_num("num_labels")?;
        let embed_dim = r.keyed_num("embed_dim")?;
        let hidden_dim = r.keyed_num("hidden_dim")?;
        let k_slots = r.keyed_num("k_slots")?;
        let horizon_text = r.keyed("horizon")?;
        let horizon = r.parse_f64(horizon_text)?;
        let config = EncoderConfig { num_labels, embed_dim, hidden_dim, k_slots, horizon };
        let params = r.params()?;
        let model = Model::from_params(config, method, params)?;
        let calibration = r.calibration()?;
        let resume_line = r.keyed("resume")?;
        let resume = if resume_line == "none" {
            None
        } else {
            let f: Vec<&str> = resume_line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(r.err("malformed resume line"));
            }
            let epochs_done = r.parse_num(f[0])?;
            let stale_epochs = r.parse_num(f[1])?;
            let best_val = if f[2] == "none" { None } else { Some(r.parse_f64(f[2])?) };
            let adam_line: Vec<&str> = r.keyed("adam")?.split_whitespace().collect();
            if adam_line.len() != 2 {
                return Err(r.err("malformed adam line"));
            }
            let step = r.parse_num(adam_line[0])? as u64;
            let count = r.parse_num(adam_line[1])?;
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for _ in 0..count {
                m.push(r.float_line()?);
                v.push(r.float_line()?);
            }
            let best_params = match r.keyed("best")? {
                "none" => None,
                "some" => Some(r.params()?),
                other => return Err(r.err(&format!("bad best marker `{other}`"))),
            };
            let rows = r.keyed_num("log")?;
            let mut log = Vec::with_capacity(rows);
            for _ in 0..rows {
                let line = r.next()?;
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(r.err("malformed log row"));
                }
                log.push(LogRow {
                    epoch: r.parse_num(f[0])?,
                    train_loss: r.parse_f64(f[1])?,
                    val_loss: r.parse_f64(f[2])?,
                    wall_seconds: r.parse_f64(f[3])?,
                });
            }
            Some(ResumeState {
                epochs_done,
                adam: AdamState { step, m, v },
                best_val,
                stale_epochs,
                best_params,
                log,
            })
        };
        if r.next()? != "end" {
            return Err(r.err("expected `end`"));
        }
        Ok(Self { trained: TrainedModel { model, calibration }, resume })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint.to_text())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_text(&fs::read_to_string(path)?)
}

struct Reader<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Checkpoint(format!("line {}: {msg}", self.pos))
    }

    fn next(&mut self) -> Result<&'a str> {
        let line = self.lines.get(self.pos).copied().ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(line)
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ => Err(self.err(&format!("expected `{key}`, found `{line}`"))),
        }
    }

    fn keyed_num(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        self.parse_num(v)
    }

    fn parse_num(&self, s: &str) -> Result<usize> {
        s.parse().map_err(|_| self.err(&format!("bad integer `{s}`")))
    }

    fn parse_f64(&self, s: &str) -> Result<f64> {
        s.parse().map_err(|_| self.err(&format!("bad number `{s}`")))
    }

    fn float_line(&mut self) -> Result<Vec<f64>> {
        let line = self.next()?;
        line.split_whitespace().map(|s| self.parse_f64(s)).collect()
    }

    fn params(&mut self) -> Result<ParamStore> {
        let count = self.keyed_num("params")?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let header: Vec<&str> = self.keyed("param")?.split_whitespace().collect();
            if header.len() < 2 {
                return Err(self.err("malformed param header"));
            }
            let rank = self.parse_num(header[1])?;
            if header.len() != 2 + rank {
                return Err(self.err("param rank does not match dimensions"));
            }
            let shape: Vec<usize> = header[2..].iter().map(|d| self.parse_num(d)).collect::<Result<_>>()?;
            let values = self.float_line()?;
            let tensor = Tensor::new(shape, values).map_err(|_| self.err("param value count does not match shape"))?;
            store.add(header[0], tensor);
        }
        Ok(store)
    }

    fn calibration(&mut self) -> Result<Option<CalibrationState>> {
        let v = self.keyed("calibration")?;
        if v == "none" {
            return Ok(None);
        }
        let n = self.parse_num(v)?;
        let mut text = String::new();
        for _ in 0..n {
            text.push_str(self.next()?);
            text.push('\n');
        }
        CalibrationState::deserialize(&text).map(Some)
    }
}
