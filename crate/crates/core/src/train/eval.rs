use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{loss_of, Result, TrainError};
use crate::data::{ChannelStats, Sample, Target};
use crate::metrics::{accuracy, compensated_sum, EvalSeries, ForecastMetrics};
use crate::model::Model;
use crate::nn::Mode;
use crate::tape::GradTape;
use crate::tensor::{stack_batch, Tensor3};

/// `B × C × T_max`, shorter samples right-padded with zeros.
pub fn batch_inputs(samples: &[&Sample]) -> Result<Tensor3> {
    let xs: Vec<&Tensor3> = samples.iter().map(|s| &s.x).collect();
    Ok(stack_batch(&xs)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Report {
    Classification { accuracy: f64 },
    Forecasting(ForecastMetrics),
}

impl Report {
    /// Accuracy (%) or RMSE: the early-stopping criterion.
    pub fn headline(&self) -> f64 {
        match self {
            Report::Classification { accuracy } => *accuracy,
            Report::Forecasting(m) => m.rmse,
        }
    }

    /// `(name, value)` pairs; undefined values are `None`.
    pub fn fields(&self) -> Vec<(&'static str, Option<f64>)> {
        match self {
            Report::Classification { accuracy } => vec![("accuracy", Some(*accuracy))],
            Report::Forecasting(m) => {
                vec![("rmse", Some(m.rmse)), ("mae", Some(m.mae)), ("mape", m.mape), ("r_squared", m.r_squared)]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub report: Report,
    /// Class index or de-normalized forecast per sample.
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(usize),
    Values(Vec<f64>),
}

/// Eval-mode outputs, one row per input.
pub fn predict(model: &Model, inputs: &[&Tensor3], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(inputs.len());
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for chunk in inputs.chunks(batch_size.max(1)) {
        let mut tape = GradTape::new();
        let bound = model.params().bind(&mut tape);
        let x = tape.leaf(stack_batch(chunk)?);
        let out = model.forward(&mut tape, &bound, x, Mode::Eval, 0.0, &mut unused)?;
        let v = tape.value(out);
        for b in 0..v.batch() {
            rows.push((0..v.channels()).map(|c| v.at(b, c, 0)).collect());
        }
    }
    Ok(rows)
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Loss and metrics on `samples`. Forecasts and targets are mapped back
/// through `target_stats` before computing metrics.
pub fn evaluate(model: &Model, samples: &[Sample], target_stats: Option<&ChannelStats>, batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(TrainError::EmptyPartition("evaluation"));
    }
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut loss_terms = Vec::with_capacity(samples.len().div_ceil(batch_size.max(1)));
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = GradTape::new();
        let bound = model.params().bind(&mut tape);
        let x = tape.leaf(batch_inputs(&refs)?);
        let out = model.forward(&mut tape, &bound, x, Mode::Eval, 0.0, &mut unused)?;
        let loss = loss_of(&mut tape, out, &refs)?;
        loss_terms.push(tape.value(loss).as_scalar()? * chunk.len() as f64);
        let v = tape.value(out);
        for b in 0..v.batch() {
            outputs.push((0..v.channels()).map(|c| v.at(b, c, 0)).collect());
        }
    }
    let loss = compensated_sum(loss_terms) / samples.len() as f64;
    let denorm = |y: f64| target_stats.map_or(y, |s| s.invert(y));
    let (report, predictions) = match &samples[0].target {
        Target::Class(_) => {
            let pred: Vec<usize> = outputs.iter().map(|r| argmax(r)).collect();
            let truth: Vec<usize> = samples
                .iter()
                .map(|s| match s.target {
                    Target::Class(c) => c,
                    Target::Values(_) => usize::MAX,
                })
                .collect();
            let acc = accuracy(&pred, &truth)?;
            (Report::Classification { accuracy: acc }, pred.into_iter().map(Prediction::Class).collect())
        }
        Target::Values(_) => {
            let mut truth = Vec::new();
            let mut pred = Vec::new();
            for (s, row) in samples.iter().zip(&outputs) {
                if let Target::Values(v) = &s.target {
                    truth.extend(v.iter().map(|&y| denorm(y)));
                }
                pred.extend(row.iter().map(|&y| denorm(y)));
            }
            let series = EvalSeries::new(truth, pred)?;
            let preds = outputs.iter().map(|r| Prediction::Values(r.iter().map(|&y| denorm(y)).collect())).collect();
            (Report::Forecasting(ForecastMetrics::compute(&series)), preds)
        }
    };
    Ok(Evaluation { loss, report, predictions })
}

/// Individual runs and their field-wise arithmetic mean.
#[derive(Clone, Debug, PartialEq)]
pub struct RepeatedEvaluation {
    pub runs: Vec<Report>,
    pub mean: Report,
}

impl RepeatedEvaluation {
    pub fn from_runs(runs: Vec<Report>) -> Result<Self> {
        let n = runs.len();
        if n == 0 {
            return Err(TrainError::Config("repeats must be ≥ 1".into()));
        }
        // Shifted by the first run so identical runs average to exactly that run.
        let mean_of = |f: &dyn Fn(&Report) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = runs.iter().map(f).collect::<Option<_>>()?;
            Some(vals[0] + compensated_sum(vals.iter().map(|v| v - vals[0])) / n as f64)
        };
        let mean = match runs[0] {
            Report::Classification { .. } => Report::Classification {
                accuracy: mean_of(&|r| match r {
                    Report::Classification { accuracy } => Some(*accuracy),
                    _ => None,
                })
                .ok_or_else(|| TrainError::Config("mixed report kinds".into()))?,
            },
            Report::Forecasting(_) => {
                let get = |f: fn(&ForecastMetrics) -> Option<f64>| {
                    mean_of(&|r| match r {
                        Report::Forecasting(m) => f(m),
                        _ => None,
                    })
                };
                Report::Forecasting(ForecastMetrics {
                    rmse: get(|m| Some(m.rmse)).ok_or_else(|| TrainError::Config("mixed report kinds".into()))?,
                    mae: get(|m| Some(m.mae)).ok_or_else(|| TrainError::Config("mixed report kinds".into()))?,
                    mape: get(|m| m.mape),
                    r_squared: get(|m| m.r_squared),
                })
            }
        };
        Ok(RepeatedEvaluation { runs, mean })
    }
}

/// Evaluates one checkpoint `repeats` times with dropout disabled.
pub fn evaluate_repeated(
    model: &Model,
    samples: &[Sample],
    target_stats: Option<&ChannelStats>,
    batch_size: usize,
    repeats: usize,
) -> Result<RepeatedEvaluation> {
    let runs = (0..repeats)
        .map(|_| evaluate(model, samples, target_stats, batch_size).map(|e| e.report))
        .collect::<Result<Vec<_>>>()?;
    RepeatedEvaluation::from_runs(runs)
}
