//! `detpp` command-line tool: generate data, train, predict, evaluate and
//! run the synthetic comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use detpp_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use detpp_core::config::{ConfigFile, RunConfig};
use detpp_core::event::{load_sequences, save_sequences, EventSequence};
use detpp_core::experiment::{format_table, reproduce, thresholds_of, BenchmarkSpec};
use detpp_core::infer::{read_predictions, write_predictions};
use detpp_core::metrics::{evaluate_predictions, predict_dataset, EvalConfig};
use detpp_core::synth::{generate_hawkes, generate_markov_bursts, split_dataset, HawkesSpec, MarkovBurstSpec};
use detpp_core::train::{log_to_csv, resume_training, train, with_threads, TrainedModel};
use detpp_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "detpp", version, about = "Long-horizon event sequence forecasting")]
struct Cli {
    /// Worker threads (0 uses all cores, 1 is the deterministic reference path).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic dataset and write train/val/test JSONL files.
    Generate(GenerateArgs),
    /// Train a model from a `key = value` config file.
    Train(TrainArgs),
    /// Write forecasts for every evaluation anchor of a dataset.
    Predict(PredictArgs),
    /// Score a prediction dump against a dataset.
    Evaluate(EvaluateArgs),
    /// Train and compare all methods on the synthetic benchmark.
    Reproduce(ReproduceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Poisson,
    Hawkes,
    Markov,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "markov")]
    kind: Generator,
    #[arg(long, default_value_t = 5)]
    num_labels: usize,
    #[arg(long, default_value_t = 50.0)]
    t_max: f64,
    #[arg(long, default_value_t = 100)]
    sequences: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base rate per label (poisson and hawkes).
    #[arg(long, default_value_t = 0.2)]
    mu: f64,
    /// Excitation added to every label pair (hawkes).
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Kernel decay (hawkes).
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Diagonal transition probability (markov); random rows when omitted.
    #[arg(long)]
    self_prob: Option<f64>,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    split: Vec<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Override a config key, e.g. `--set epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_history: usize,
    /// Step cap for autoregressive rollouts (defaults to K).
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    num_labels: usize,
    #[arg(long)]
    horizon: f64,
    /// Events kept per anchor window (K).
    #[arg(long)]
    max_events: usize,
    #[arg(long)]
    c_del: Option<f64>,
    /// T-mAP time tolerance (defaults to H/10).
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 1)]
    min_history: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    sequences: Option<usize>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_numerical() {
                3
            } else if e.is_data() || matches!(e, Error::Io(_)) {
                2
            } else {
                1
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a, cli.threads),
        Command::Predict(a) => cmd_predict(a, cli.threads),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Reproduce(a) => cmd_reproduce(a, cli.threads),
    }
}

fn summary(seqs: &[EventSequence], num_labels: usize) -> serde_json::Value {
    let mut counts = vec![0usize; num_labels];
    let mut total = 0usize;
    for s in seqs {
        for e in s.events() {
            counts[e.label] += 1;
            total += 1;
        }
    }
    let marginals: Vec<f64> = counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect();
    json!({
        "sequences": seqs.len(),
        "events": total,
        "mean_length": if seqs.is_empty() { 0.0 } else { total as f64 / seqs.len() as f64 },
        "label_marginals": marginals,
    })
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let l = a.num_labels;
    let seqs = match a.kind {
        Generator::Poisson => generate_hawkes(&HawkesSpec::poisson(l, a.mu, a.t_max, a.seed)?, a.sequences),
        Generator::Hawkes => {
            let spec = HawkesSpec::new(vec![a.mu; l], vec![vec![a.alpha; l]; l], a.beta, a.t_max, a.seed)?;
            generate_hawkes(&spec, a.sequences)
        }
        Generator::Markov => {
            let spec = MarkovBurstSpec { num_labels: l, t_max: a.t_max, seed: a.seed, self_prob: a.self_prob };
            generate_markov_bursts(&spec, a.sequences)?
        }
    };
    let (train, val, test) = split_dataset(seqs, (a.split[0], a.split[1], a.split[2]), a.seed)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut report = BTreeMap::new();
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = a.out_dir.join(format!("{name}.jsonl"));
        save_sequences(part, &path)?;
        report.insert(name, summary(part, l));
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn load(path: &Path, num_labels: usize) -> anyhow::Result<Vec<EventSequence>> {
    load_sequences(path, num_labels).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train(a: TrainArgs, threads: usize) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut file = ConfigFile::parse(&text)?;
    for o in &a.overrides {
        file.set_override(o)?;
    }
    if threads > 0 {
        file.set("threads", threads);
    }
    if let Some(r) = &a.resume {
        file.set("resume", r.display());
    }
    let run = RunConfig::from_file(&file)?;
    let l = run.train.num_labels;
    let (Some(train_path), Some(val_path), Some(ckpt_path)) = (&run.train_path, &run.val_path, &run.checkpoint_path) else {
        return Err(Error::Config { key: "train/val/checkpoint".into(), line: 0, message: "paths are required".into() }.into());
    };
    let train_set = load(train_path, l)?;
    let val_set = load(val_path, l)?;
    let outcome = match &run.resume_path {
        None => train(&run.train, &train_set, &val_set)?,
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let Some(state) = ckpt.resume else {
                bail!(Error::Checkpoint(format!("{} has no resume state", path.display())));
            };
            if ckpt.trained.model.method() != run.train.method || ckpt.trained.model.config() != &run.train.encoder_config() {
                bail!(Error::Validation("checkpoint architecture differs from the config".into()));
            }
            resume_training(&run.train, ckpt.trained, state, &train_set, &val_set)?
        }
    };
    save_checkpoint(&Checkpoint { trained: outcome.best.clone(), resume: None }, ckpt_path)?;
    let last_path = last_checkpoint_path(ckpt_path);
    save_checkpoint(&Checkpoint { trained: outcome.last.clone(), resume: Some(outcome.resume.clone()) }, &last_path)?;
    if let Some(log) = &run.log_path {
        std::fs::write(log, log_to_csv(&outcome.log))?;
    }
    let last = outcome.log.last();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "method": run.train.method.as_str(),
            "seed": run.train.seed,
            "epochs": outcome.log.len(),
            "stopped_early": outcome.stopped_early,
            "final_train_loss": last.map(|r| r.train_loss),
            "final_val_loss": last.map(|r| r.val_loss),
            "best_checkpoint": ckpt_path.display().to_string(),
            "last_checkpoint": last_path.display().to_string(),
        }))?
    );
    Ok(())
}

/// `model.ckpt` -> `model.ckpt.last`
fn last_checkpoint_path(best: &Path) -> PathBuf {
    let mut s = best.as_os_str().to_owned();
    s.push(".last");
    PathBuf::from(s)
}

fn cmd_predict(a: PredictArgs, threads: usize) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let TrainedModel { model, calibration } = ckpt.trained;
    let cfg = model.config().clone();
    let data = load_sequences(&a.data, cfg.num_labels).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("label count mismatch with checkpoint (L = {}): {m}", cfg.num_labels)),
        other => other,
    })?;
    let thresholds = thresholds_of(&TrainedModel { model: model.clone(), calibration })?;
    let mut eval = EvalConfig::new(cfg.horizon, cfg.k_slots);
    eval.min_history = a.min_history;
    eval.max_steps = a.max_steps.unwrap_or(cfg.k_slots);
    let records = with_threads(threads, || predict_dataset(&model, thresholds.as_ref(), &data, &eval))??;
    write_predictions(&records, &a.out)?;
    println!("{}", json!({ "anchors": records.len(), "out": a.out.display().to_string() }));
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let data = load(&a.data, a.num_labels)?;
    let records = read_predictions(&a.predictions).with_context(|| format!("loading {}", a.predictions.display()))?;
    let mut cfg = EvalConfig::new(a.horizon, a.max_events);
    if let Some(c) = a.c_del {
        cfg.c_del = c;
    }
    if let Some(d) = a.delta {
        cfg.delta = d;
    }
    cfg.min_history = a.min_history;
    let report = evaluate_predictions(&records, &data, &cfg)?;
    let out = json!({
        "config": {
            "horizon": cfg.horizon,
            "max_events": cfg.max_events,
            "c_del": cfg.c_del,
            "delta": cfg.delta,
            "min_history": cfg.min_history,
            "num_labels": a.num_labels,
            "seed": a.seed,
        },
        "report": report,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_reproduce(a: ReproduceArgs, threads: usize) -> anyhow::Result<()> {
    let mut spec = BenchmarkSpec::default();
    if let Some(e) = a.epochs {
        spec.epochs = e;
    }
    if let Some(n) = a.sequences {
        spec.n_sequences = n;
    }
    let report = reproduce(&spec, a.seed, threads)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &json)?;
    }
    print!("{}", format_table(&report));
    println!("{json}");
    Ok(())
}
