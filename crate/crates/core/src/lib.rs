//! Long-horizon event forecasting for marked temporal point processes.
//!
//! The central model predicts a fixed set of K future events per anchor, each
//! with a presence probability, a time offset and a label distribution, and is
//! trained by matching the set against the ground-truth horizon with an
//! optimal assignment. Next-event (autoregressive) and positional next-K
//! baselines share the same GRU encoder so that only the head and loss differ.
//!
//! Modules:
//! - [`event`]: sequences, JSONL I/O, horizon targets
//! - [`synth`]: Hawkes and Markov-burst generators
//! - [`grad`]: tensors and reverse-mode differentiation
//! - [`model`]: encoder and heads
//! - [`matching`]: Hungarian assignment and the matching loss
//! - [`calibrate`]: per-slot presence thresholds
//! - [`infer`]: filtering, sorting, rollouts and the prediction dump
//! - [`metrics`]: next-item, OTD, T-mAP and entropy metrics
//! - [`train`]: Adam, clipping and the training loop
//! - [`checkpoint`], [`config`], [`experiment`]

pub mod calibrate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod event;
pub mod experiment;
pub mod grad;
pub mod infer;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use calibrate::CalibrationState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Error, Result};
pub use event::{load_sequences, save_sequences, Event, EventSequence, HorizonTarget};
pub use infer::{ForecastEvent, PredictionRecord, Thresholds};
pub use metrics::{EvalConfig, MetricReport};
pub use model::{EncoderConfig, Method, Model, PredictionSet};
pub use train::{TrainConfig, TrainedModel};
