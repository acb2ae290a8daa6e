//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::Method;
use crate::train::TrainConfig;

/// Parsed key/value pairs, remembering the line each key came from.
/// Overrides set from the command line report line 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config { key: line.to_string(), line: i + 1, message: "expected `key = value`".into() });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config { key: String::new(), line: i + 1, message: "empty key".into() });
            }
            if entries.insert(key.to_string(), (value.trim().to_string(), i + 1)).is_some() {
                return Err(Error::Config { key: key.to_string(), line: i + 1, message: "duplicate key".into() });
            }
        }
        Ok(Self { entries })
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            key: assignment.to_string(),
            line: 0,
            message: "override must look like key=value".into(),
        })?;
        self.entries.insert(k.trim().to_string(), (v.trim().to_string(), 0));
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| Error::Config {
                key: key.to_string(),
                line: *line,
                message: format!("cannot parse `{v}`: {e}"),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| Error::Config { key: key.to_string(), line: 0, message: "required key is missing".into() })
    }

    /// Rejects keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, (_, line))) => Err(Error::Config { key: k.clone(), line: *line, message: "unknown key".into() }),
            None => Ok(()),
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(_, l)| *l)
    }
}

pub const RUN_KEYS: &[&str] = &[
    "method", "epochs", "batch_size", "learning_rate", "grad_clip_norm", "seed", "num_labels", "k_slots",
    "horizon", "embed_dim", "hidden_dim", "min_history", "calibration_warmup", "reservoir_capacity", "patience",
    "threads", "train", "val", "test", "checkpoint", "log", "resume", "c_del", "delta", "max_steps",
];

/// Everything a `train`, `predict` or `evaluate` run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub resume_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(cfg: &ConfigFile) -> Result<Self> {
        cfg.check_known(RUN_KEYS)?;
        let method_str = cfg.get_str("method").unwrap_or("detpp");
        let method = Method::from_str(method_str).map_err(|e| Error::Config {
            key: "method".into(),
            line: cfg.line_of("method"),
            message: e.to_string(),
        })?;
        let num_labels: usize = cfg.require("num_labels")?;
        let k_slots = cfg.get_or("k_slots", 32)?;
        let horizon: f64 = cfg.require("horizon")?;
        let mut train = TrainConfig::new(method, num_labels, k_slots, horizon);
        train.epochs = cfg.get_or("epochs", train.epochs)?;
        train.batch_size = cfg.get_or("batch_size", train.batch_size)?;
        train.learning_rate = cfg.get_or("learning_rate", train.learning_rate)?;
        train.grad_clip_norm = cfg.get_or("grad_clip_norm", train.grad_clip_norm)?;
        train.seed = cfg.get_or("seed", train.seed)?;
        train.embed_dim = cfg.get_or("embed_dim", train.embed_dim)?;
        train.hidden_dim = cfg.get_or("hidden_dim", train.hidden_dim)?;
        train.min_history = cfg.get_or("min_history", train.min_history)?;
        train.calibration_warmup = cfg.get_or("calibration_warmup", train.calibration_warmup)?;
        train.reservoir_capacity = cfg.get_or("reservoir_capacity", train.reservoir_capacity)?;
        train.patience = cfg.get_or("patience", train.patience)?;
        train.threads = cfg.get_or("threads", train.threads)?;
        train.validate().map_err(|e| Error::Config { key: "(model)".into(), line: 0, message: e.to_string() })?;
        let mut eval = EvalConfig::new(horizon, k_slots);
        eval.c_del = cfg.get_or("c_del", eval.c_del)?;
        eval.delta = cfg.get_or("delta", eval.delta)?;
        eval.min_history = train.min_history;
        eval.max_steps = cfg.get_or("max_steps", eval.max_steps)?;
        if !(eval.c_del > 0.0) || !(eval.delta > 0.0) || eval.max_steps == 0 {
            return Err(Error::Config { key: "c_del/delta/max_steps".into(), line: 0, message: "must be positive".into() });
        }
        let path = |k: &str| cfg.get_str(k).map(PathBuf::from);
        let run = Self {
            train,
            eval,
            train_path: path("train"),
            val_path: path("val"),
            test_path: path("test"),
            checkpoint_path: path("checkpoint"),
            log_path: path("log"),
            resume_path: path("resume"),
        };
        run.check_distinct_paths()?;
        Ok(run)
    }

    fn check_distinct_paths(&self) -> Result<()> {
        let outputs = [("checkpoint", &self.checkpoint_path), ("log", &self.log_path)];
        let inputs = [("train", &self.train_path), ("val", &self.val_path), ("test", &self.test_path)];
        for (ka, a) in outputs.iter() {
            let Some(a) = a else { continue };
            for (kb, b) in outputs.iter().chain(inputs.iter()) {
                if ka != kb && b.as_ref() == Some(a) {
                    return Err(Error::Config { key: ka.to_string(), line: 0, message: format!("path is also used for `{kb}`") });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments_and_overrides() {
        let mut cfg = ConfigFile::parse("# run\nmethod = mae_ce  # baseline\nnum_labels=4\nhorizon = 2.5\n\n").unwrap();
        cfg.set_override("epochs=3").unwrap();
        let run = RunConfig::from_file(&cfg).unwrap();
        assert_eq!(run.train.method, Method::MaeCe);
        assert_eq!(run.train.epochs, 3);
        assert_eq!(run.eval.delta, 0.25);
    }

    #[test]
    fn errors_name_key_and_line() {
        let cfg = ConfigFile::parse("num_labels = 4\nhorizon = 1\nmethod = rmtpp\n").unwrap();
        match RunConfig::from_file(&cfg) {
            Err(Error::Config { key, line, .. }) => assert_eq!((key.as_str(), line), ("method", 3)),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = ConfigFile::parse("num_labels = four\nhorizon = 1\n").unwrap();
        assert!(matches!(RunConfig::from_file(&cfg), Err(Error::Config { line: 1, .. })));
        assert!(matches!(ConfigFile::parse("a = 1\nnonsense\n"), Err(Error::Config { line: 2, .. })));
        let cfg = ConfigFile::parse("num_labels = 4\nhorizon = 1\nbogus = 2\n").unwrap();
        assert!(matches!(RunConfig::from_file(&cfg), Err(Error::Config { key, .. }) if key == "bogus"));
    }

    #[test]
    fn output_paths_must_be_distinct() {
        let cfg = ConfigFile::parse("num_labels = 4\nhorizon = 1\ntrain = a.jsonl\ncheckpoint = a.jsonl\n").unwrap();
        assert!(RunConfig::from_file(&cfg).is_err());
    }
}
