//! Command-line surface: run configuration, the `train`, `eval`, `predict`,
//! `gradcheck` and `synth` commands, and their output files.
//!
//! Outputs written to `--out`:
//!
//! * `checkpoint.bin`: see [`checkpoint`].
//! * `history.csv`: `epoch,lr,train_loss,train_metric,val_loss,val_metric`,
//!   one row per completed epoch. Metrics are accuracy in percent for
//!   classification and RMSE for forecasting.
//! * `metrics.csv`: one row per validation repeat plus a final `mean` row;
//!   columns `repeat,accuracy` or `repeat,rmse,mae,mape,r_squared`.
//!   Undefined values are written as `N/A`.
//! * `predictions.csv` (predict): `sample,prediction` or `sample,step_1,...`.

pub mod checkpoint;
mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::data::{self, DataError, DatasetSplit, Schema, SynthTask};
use crate::gradcheck::{self, Scope};
use crate::model::{Model, ModelKind};
use crate::train::{self, evaluate_repeated, EpochRecord, RepeatedEvaluation, Report, TrainError, Trainer};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ModelSection, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// 1 usage/config, 2 data, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "gres2net", version, about = "Gated Res2Net for multivariate time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_model)]
        model: Option<ModelKind>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Repeat by retraining with consecutive seeds.
        #[arg(long)]
        retrain: bool,
        /// Continue from the training state stored in a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the validation data of a config, or on a CSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required_unless_present = "data")]
        config: Option<PathBuf>,
        #[arg(long, requires = "schema")]
        data: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict every sample of a CSV file; label and target columns are optional.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// all, tensor, nn, res2net or train.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Write a synthetic dataset with its schema and a ready-to-run config.
    Synth {
        #[arg(long, value_parser = parse_synth)]
        task: SynthTask,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, value_parser = parse_model)]
        model: Option<ModelKind>,
    },
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse()
}

fn parse_synth(s: &str) -> Result<SynthTask, String> {
    s.parse()
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, seed, out, model, repeats, epochs, retrain, resume, quiet } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = model {
                cfg.model.kind = m;
            }
            if let Some(r) = repeats {
                cfg.train.eval_repeats = r;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.train.retrain |= retrain;
            let out = out.or_else(|| cfg.out_dir()).ok_or_else(|| CliError::Usage("--out is required".into()))?;
            cmd_train(&cfg, &out, resume.as_deref(), quiet)
        }
        Command::Eval { checkpoint, config, data, schema, repeats, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let report = match (config, data, schema) {
                (_, Some(d), Some(s)) => cmd_eval_file(&ckpt, &d, &s, repeats)?,
                (Some(c), _, _) => cmd_eval_config(&ckpt, &RunConfig::load(&c)?, repeats)?,
                _ => return Err(CliError::Usage("eval needs --config or --data with --schema".into())),
            };
            print_report(&report);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let path = dir.join("metrics.csv");
                checkpoint::write_atomic(&path, metrics_csv(&report).as_bytes()).map_err(io_err(&path))?;
            }
            Ok(())
        }
        Command::Predict { checkpoint, data, schema, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let text = cmd_predict(&ckpt, &data, &schema)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                    let path = dir.join("predictions.csv");
                    checkpoint::write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
                }
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Gradcheck { scope, seed, seeds } => cmd_gradcheck(&scope, seed, seeds),
        Command::Synth { task, seed, out, size, model } => cmd_synth(task, seed, &out, size, model),
    }
}

/// Loads, splits and normalizes the data a config points to.
pub fn load_data(cfg: &RunConfig) -> Result<(Schema, DatasetSplit), CliError> {
    let paths = cfg.data_paths();
    let schema = Schema::load(&paths.schema)?;
    let train = data::load_csv(&paths.train, &schema)?;
    let (train, validation) = match &paths.validation {
        Some(v) => (train, data::load_csv(v, &schema)?),
        None => data::split_chronological(&train, paths.validation_fraction)?,
    };
    let split = data::build_split(&schema, &train, &validation)?;
    Ok((schema, split.normalize()?))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>, quiet: bool) -> Result<(), CliError> {
    let schema = Schema::load(&cfg.data_paths().schema)?;
    let config = cfg.train_config();
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(task) = RunConfig::schema_task(&schema) {
        cfg.model_spec(task, schema.features.len())?;
    }
    let (_, split) = load_data(cfg)?;
    let spec = cfg.model_spec(split.task, split.channels)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    let model = Model::new(spec.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut previous: Vec<EpochRecord> = Vec::new();
    let mut trainer = match resume {
        None => Trainer::new(model, &split, config.clone())?,
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.spec != spec {
                return Err(CliError::Config("checkpoint topology differs from the config".into()));
            }
            let state = ckpt.state.ok_or_else(|| CliError::Data("checkpoint has no training state".into()))?;
            let history = out.join("history.csv");
            if history.exists() {
                previous = read_history(&history)?;
                previous.retain(|r| r.epoch < state.epoch);
            }
            Trainer::resume(model, &split, config.clone(), state)?
        }
    };
    let start = Instant::now();
    trainer.run(|r| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  lr {:.1e}  train loss {:.5}  train {:.4}  val loss {:.5}  val {:.4}",
                r.epoch, r.lr, r.train_loss, r.train_metric, r.val_loss, r.val_metric
            );
        }
    })?;
    let best = trainer.best_model();
    let batch = config.batch_size_for(split.task);
    let target_stats = split.normalization.as_ref().and_then(|n| n.target.as_ref());
    let report = if config.retrain {
        train::retrain_repeated(&spec, &split, &config)?
    } else {
        evaluate_repeated(&best, &split.validation, target_stats, batch, config.eval_repeats)?
    };

    let mut history = previous;
    history.extend_from_slice(trainer.history());
    let ckpt = Checkpoint::new(&best, split.normalization.clone(), Some(trainer.state()));
    ckpt.save(&out.join("checkpoint.bin"))?;
    let hist_path = out.join("history.csv");
    checkpoint::write_atomic(&hist_path, history_csv(&history).as_bytes()).map_err(io_err(&hist_path))?;
    let metrics_path = out.join("metrics.csv");
    checkpoint::write_atomic(&metrics_path, metrics_csv(&report).as_bytes()).map_err(io_err(&metrics_path))?;
    if !quiet {
        eprintln!("trained {} epochs in {:.1}s", trainer.history().len(), start.elapsed().as_secs_f64());
    }
    if let Some(b) = trainer.best() {
        println!("best epoch {} (validation {:.6})", b.epoch, b.metric);
    }
    print_report(&report);
    Ok(())
}

/// Re-evaluates on the validation partition a config defines, with the
/// checkpoint's own normalization.
pub fn cmd_eval_config(ckpt: &Checkpoint, cfg: &RunConfig, repeats: usize) -> Result<RepeatedEvaluation, CliError> {
    let paths = cfg.data_paths();
    let schema = Schema::load(&paths.schema)?;
    check_channels(ckpt, &schema)?;
    let train = data::load_csv(&paths.train, &schema)?;
    let (train, validation) = match &paths.validation {
        Some(v) => (train, data::load_csv(v, &schema)?),
        None => data::split_chronological(&train, paths.validation_fraction)?,
    };
    let split = data::build_split(&schema, &train, &validation)?;
    evaluate_checkpoint(ckpt, &split.validation, repeats, cfg.train_config().batch_size_for(split.task))
}

/// Evaluates every sample of one labelled file.
pub fn cmd_eval_file(ckpt: &Checkpoint, data_path: &Path, schema_path: &Path, repeats: usize) -> Result<RepeatedEvaluation, CliError> {
    let schema = Schema::load(schema_path)?;
    check_channels(ckpt, &schema)?;
    let table = data::load_csv(data_path, &schema)?;
    let task = schema.resolve_task(&[&table])?;
    let samples = data::table_samples(&schema, task, &table)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: no samples", data_path.display())));
    }
    evaluate_checkpoint(ckpt, &samples, repeats, train::TrainConfig::default().batch_size_for(ckpt.spec.task))
}

fn check_channels(ckpt: &Checkpoint, schema: &Schema) -> Result<(), CliError> {
    let (expected, found) = (ckpt.spec.input_channels, schema.features.len());
    if expected != found {
        return Err(CliError::Data(format!("channel mismatch: model expects {expected} channels, data has {found}")));
    }
    let task_ok = match (ckpt.spec.task, schema.task) {
        (crate::model::Task::Classification { .. }, data::TaskKind::Classification) => true,
        (crate::model::Task::Forecasting { horizon }, data::TaskKind::Forecasting) => horizon == schema.window.horizon,
        _ => false,
    };
    if !task_ok {
        return Err(CliError::Data(format!("data task {:?} does not fit model task {:?}", schema.task, ckpt.spec.task)));
    }
    Ok(())
}

fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    samples: &[data::Sample],
    repeats: usize,
    batch: usize,
) -> Result<RepeatedEvaluation, CliError> {
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be ≥ 1".into()));
    }
    let model = ckpt.model()?;
    let (samples, target_stats) = match &ckpt.normalization {
        Some(n) => {
            let mapped: Vec<data::Sample> = samples
                .iter()
                .map(|s| data::Sample {
                    x: n.apply_input(&s.x),
                    target: match (&s.target, &n.target) {
                        (data::Target::Values(v), Some(t)) => data::Target::Values(v.iter().map(|&y| t.apply(y)).collect()),
                        (other, _) => other.clone(),
                    },
                })
                .collect();
            (mapped, n.target.as_ref())
        }
        None => (samples.to_vec(), None),
    };
    if let Some(bad) = samples.iter().position(|s| match (&s.target, ckpt.spec.task) {
        (data::Target::Class(c), crate::model::Task::Classification { classes }) => *c >= classes,
        _ => false,
    }) {
        return Err(CliError::Data(format!("sample {bad} has a label outside the model's classes")));
    }
    Ok(evaluate_repeated(&model, &samples, target_stats, batch, repeats)?)
}

pub fn cmd_predict(ckpt: &Checkpoint, data_path: &Path, schema_path: &Path) -> Result<String, CliError> {
    let schema = Schema::load(schema_path)?;
    let (expected, found) = (ckpt.spec.input_channels, schema.features.len());
    if expected != found {
        return Err(CliError::Data(format!("channel mismatch: model expects {expected} channels, data has {found}")));
    }
    let inputs_schema = schema.inputs_only();
    let table = data::load_csv(data_path, &inputs_schema)?;
    let inputs = data::table_inputs(&inputs_schema, &table)?;
    let inputs: Vec<_> = match &ckpt.normalization {
        Some(n) => inputs.iter().map(|x| n.apply_input(x)).collect(),
        None => inputs,
    };
    let model = ckpt.model()?;
    let refs: Vec<_> = inputs.iter().collect();
    let rows = train::predict(&model, &refs, 64)?;
    let mut out = String::new();
    match ckpt.spec.task {
        crate::model::Task::Classification { .. } => {
            out.push_str("sample,prediction\n");
            for (i, r) in rows.iter().enumerate() {
                out.push_str(&format!("{i},{}\n", train::argmax(r)));
            }
        }
        crate::model::Task::Forecasting { horizon } => {
            let stats = ckpt.normalization.as_ref().and_then(|n| n.target);
            out.push_str("sample");
            for h in 1..=horizon {
                out.push_str(&format!(",step_{h}"));
            }
            out.push('\n');
            for (i, r) in rows.iter().enumerate() {
                out.push_str(&i.to_string());
                for &y in r {
                    out.push_str(&format!(",{}", stats.map_or(y, |s| s.invert(y))));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn cmd_gradcheck(scope: &str, seed: u64, seeds: usize) -> Result<(), CliError> {
    let scopes: Vec<Scope> = if scope == "all" {
        Scope::ALL.to_vec()
    } else {
        vec![Scope::parse(scope).ok_or_else(|| CliError::Usage(format!("unknown scope `{scope}`")))?]
    };
    let mut failures = Vec::new();
    println!("{:<10} {:<28} {:>6} {:>12} {:>8}", "scope", "operation", "cases", "max rel err", "seconds");
    for s in scopes {
        let reports = gradcheck::run_scope(s, seed, seeds).map_err(|e| CliError::Verification(e.to_string()))?;
        for r in reports {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            println!(
                "{:<10} {:<28} {:>6} {:>12.3e} {:>8.3} {verdict}",
                r.scope.name(),
                r.operation,
                r.cases,
                r.max_rel_error,
                r.seconds
            );
            if !r.passed() {
                failures.push(format!("{}/{}", r.scope.name(), r.operation));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed for {}", failures.join(", "))))
    }
}

pub fn cmd_synth(task: SynthTask, seed: u64, out: &Path, size: Option<usize>, model: Option<ModelKind>) -> Result<(), CliError> {
    let default_size = match task {
        SynthTask::Classification => 64,
        SynthTask::Forecasting => 1000,
    };
    let generated = data::make_synthetic(task, seed, size.unwrap_or(default_size))?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    for (name, table) in [("train.csv", &generated.train), ("validation.csv", &generated.validation)] {
        let mut buf = Vec::new();
        data::write_table(table, &generated.schema, &mut buf)?;
        let path = out.join(name);
        checkpoint::write_atomic(&path, &buf).map_err(io_err(&path))?;
    }
    let schema_path = out.join("schema.toml");
    checkpoint::write_atomic(&schema_path, generated.schema.to_toml().as_bytes()).map_err(io_err(&schema_path))?;
    let cfg = RunConfig::for_synthetic(task, seed, model.unwrap_or(ModelKind::Gres2net));
    let cfg_path = out.join("config.toml");
    checkpoint::write_atomic(&cfg_path, cfg.to_toml().as_bytes()).map_err(io_err(&cfg_path))?;
    println!("wrote {} (noise σ = {})", out.display(), generated.spec.noise);
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| x.to_string())
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = EpochRecord::COLUMNS.join(",");
    s.push('\n');
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.train_metric, r.val_loss, r.val_metric
        ));
    }
    s
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>, CliError> {
    let mut rdr = ::csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let f = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Data(format!("{}: malformed history row", path.display())))
        };
        out.push(EpochRecord {
            epoch: f(0)? as usize,
            lr: f(1)?,
            train_loss: f(2)?,
            train_metric: f(3)?,
            val_loss: f(4)?,
            val_metric: f(5)?,
        });
    }
    Ok(out)
}

pub fn metrics_csv(report: &RepeatedEvaluation) -> String {
    let names: Vec<&str> = report.mean.fields().iter().map(|(n, _)| *n).collect();
    let mut s = format!("repeat,{}\n", names.join(","));
    let row = |label: String, r: &Report| {
        let vals: Vec<String> = r.fields().iter().map(|(_, v)| fmt_opt(*v)).collect();
        format!("{label},{}\n", vals.join(","))
    };
    for (i, r) in report.runs.iter().enumerate() {
        s.push_str(&row((i + 1).to_string(), r));
    }
    s.push_str(&row("mean".into(), &report.mean));
    s
}

fn print_report(report: &RepeatedEvaluation) {
    let fields: Vec<String> = report
        .mean
        .fields()
        .iter()
        .map(|(n, v)| format!("{n} {}", v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.6}"))))
        .collect();
    println!("validation (mean of {}): {}", report.runs.len(), fields.join("  "));
}
