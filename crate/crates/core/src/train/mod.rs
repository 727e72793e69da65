//! Optimization: Adam, the step-decay learning-rate schedule, minibatch
//! training with early stopping on the validation metric, and evaluation.

mod adam;
mod eval;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DatasetSplit, Sample, Target};
use crate::metrics::MetricsError;
use crate::model::{Model, ModelSpec, Task};
use crate::nn::{Mode, ParamStore};
use crate::tape::GradTape;
use crate::tensor::{Tensor3, TensorError};

pub use adam::AdamState;
pub use eval::{argmax, batch_inputs, evaluate, evaluate_repeated, predict, Evaluation, Prediction, RepeatedEvaluation, Report};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite gradient in parameter {param} at element {index}; step aborted")]
    NonFiniteGradient { param: usize, index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; training halted")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Training protocol. Defaults: Adam at 0.001 for 500 epochs, divided by
/// ten every 100 epochs, dropout 0.5, batch 32 for classification and 64
/// for forecasting, validation repeated 5 times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Task-dependent default when absent.
    pub batch_size: Option<usize>,
    pub dropout: f64,
    pub seed: u64,
    pub eval_repeats: usize,
    /// Repeat by retraining with seeds `seed, seed + 1, ...` instead of
    /// re-evaluating one checkpoint.
    pub retrain: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            epochs: 500,
            decay_every: 100,
            decay_factor: 0.1,
            batch_size: None,
            dropout: 0.5,
            seed: 0,
            eval_repeats: 5,
            retrain: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be ≥ 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.eval_repeats == 0 {
            return bad("eval_repeats must be ≥ 1");
        }
        Ok(())
    }

    pub fn batch_size_for(&self, task: Task) -> usize {
        self.batch_size.unwrap_or(if task.is_classification() { 32 } else { 64 })
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let k = (epoch / config.decay_every.max(1)) as i32;
    config.lr0 * config.decay_factor.powi(k)
}

/// Accuracy is maximized, RMSE minimized.
pub fn higher_is_better(task: Task) -> bool {
    task.is_classification()
}

/// Strict improvement; NaN never improves.
pub fn improves(task: Task, candidate: f64, best: f64) -> bool {
    if higher_is_better(task) {
        candidate > best
    } else {
        candidate < best
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss with dropout active.
    pub train_loss: f64,
    /// Headline metric of the train partition in eval mode.
    pub train_metric: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

impl EpochRecord {
    pub const COLUMNS: [&'static str; 6] = ["epoch", "lr", "train_loss", "train_metric", "val_loss", "val_metric"];
}

/// Parameters with the best validation metric seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    pub epoch: usize,
    pub metric: f64,
    pub params: ParamStore,
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub current: ParamStore,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub best: Option<Best>,
}

pub struct Trainer<'d> {
    model: Model,
    data: &'d DatasetSplit,
    config: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
    best: Option<Best>,
    history: Vec<EpochRecord>,
}

/// Stream 1 keeps the shuffle/dropout sequence apart from initialization.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, data: &'d DatasetSplit, config: TrainConfig) -> Result<Self> {
        let state = TrainState {
            epoch: 0,
            current: model.params().clone(),
            adam: AdamState::new(model.params().tensors()),
            rng: training_rng(config.seed),
            best: None,
        };
        Self::resume(model, data, config, state)
    }

    pub fn resume(mut model: Model, data: &'d DatasetSplit, config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        if data.train.is_empty() {
            return Err(TrainError::EmptyPartition("train"));
        }
        if data.validation.is_empty() {
            return Err(TrainError::EmptyPartition("validation"));
        }
        let spec = model.spec();
        if spec.task != data.task || spec.input_channels != data.channels {
            return Err(TrainError::Config(format!(
                "model expects {:?} with {} channels, data is {:?} with {}",
                spec.task, spec.input_channels, data.task, data.channels
            )));
        }
        model.load_params(state.current)?;
        Ok(Trainer {
            model,
            data,
            config,
            adam: state.adam,
            rng: state.rng,
            epoch: state.epoch,
            best: state.best,
            history: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn best(&self) -> Option<&Best> {
        self.best.as_ref()
    }

    pub fn current(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            epoch: self.epoch,
            current: self.model.params().clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            best: self.best.clone(),
        }
    }

    /// Best-validation parameters, or the current ones before any epoch.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.load_params(b.params.clone()).expect("same structure");
        }
        m
    }

    fn target_stats(&self) -> Option<&crate::data::ChannelStats> {
        self.data.normalization.as_ref().and_then(|n| n.target.as_ref())
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let task = self.data.task;
        let lr = lr_at_epoch(&self.config, self.epoch);
        let batch = self.config.batch_size_for(task);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &self.data.train[i]).collect();
            let mut tape = GradTape::new();
            let bound = self.model.params().bind(&mut tape);
            let x = tape.leaf(batch_inputs(&samples)?);
            let out = self.model.forward(&mut tape, &bound, x, Mode::Train, self.config.dropout, &mut self.rng)?;
            let loss = loss_of(&mut tape, out, &samples)?;
            let value = tape.value(loss).as_scalar()?;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch: self.epoch, batch: bi });
            }
            total += value * chunk.len() as f64;
            let grads = bound.grads(&tape.backward(loss)?);
            self.adam.step(self.model.params_mut().tensors_mut(), &grads, lr)?;
        }
        let train_loss = total / self.data.train.len() as f64;
        let on_train = evaluate(&self.model, &self.data.train, self.target_stats(), batch)?;
        let on_val = evaluate(&self.model, &self.data.validation, self.target_stats(), batch)?;
        let record = EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss,
            train_metric: on_train.report.headline(),
            val_loss: on_val.loss,
            val_metric: on_val.report.headline(),
        };
        let improved = match &self.best {
            None => !record.val_metric.is_nan(),
            Some(b) => improves(task, record.val_metric, b.metric),
        };
        if improved {
            self.best = Some(Best { epoch: self.epoch, metric: record.val_metric, params: self.model.params().clone() });
        }
        self.epoch += 1;
        self.history.push(record);
        Ok(record)
    }

    /// Runs the remaining epochs, reporting each one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while self.epoch < self.config.epochs {
            let r = self.run_epoch()?;
            on_epoch(&r);
        }
        Ok(())
    }
}

/// Mean cross-entropy over class targets or mean squared error over value targets.
pub(crate) fn loss_of(tape: &mut GradTape, out: crate::Var, samples: &[&Sample]) -> Result<crate::Var> {
    match &samples[0].target {
        Target::Class(_) => {
            let labels: Vec<usize> = samples
                .iter()
                .map(|s| match s.target {
                    Target::Class(c) => Ok(c),
                    Target::Values(_) => Err(TrainError::Config("mixed targets in batch".into())),
                })
                .collect::<Result<_>>()?;
            Ok(tape.cross_entropy(out, &labels)?)
        }
        Target::Values(first) => {
            let h = first.len();
            let mut data = Vec::with_capacity(samples.len() * h);
            for s in samples {
                match &s.target {
                    Target::Values(v) if v.len() == h => data.extend_from_slice(v),
                    _ => return Err(TrainError::Config("mixed targets in batch".into())),
                }
            }
            let target = tape.leaf(Tensor3::from_vec(samples.len(), h, 1, data)?);
            Ok(tape.mse(out, target)?)
        }
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation model (the initial one when no epoch ran).
    pub model: Model,
    pub best: Option<Best>,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
}

pub fn train_model(model: Model, data: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, data, config.clone())?;
    trainer.run(|_| {})?;
    Ok(TrainOutcome {
        model: trainer.best_model(),
        best: trainer.best.clone(),
        history: trainer.history.clone(),
        state: trainer.state(),
    })
}

/// Retrains from scratch `repeats` times with consecutive seeds and
/// evaluates each best model on the validation partition.
pub fn retrain_repeated(spec: &ModelSpec, data: &DatasetSplit, config: &TrainConfig) -> Result<RepeatedEvaluation> {
    let mut runs = Vec::with_capacity(config.eval_repeats);
    for i in 0..config.eval_repeats as u64 {
        let seed = config.seed.wrapping_add(i);
        let model = Model::new(ModelSpec { init_seed: seed, ..spec.clone() })?;
        let outcome = train_model(model, data, &TrainConfig { seed, ..config.clone() })?;
        let stats = data.normalization.as_ref().and_then(|n| n.target.as_ref());
        runs.push(evaluate(&outcome.model, &data.validation, stats, config.batch_size_for(data.task))?.report);
    }
    RepeatedEvaluation::from_runs(runs)
}
