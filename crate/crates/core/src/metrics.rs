//! Accuracy, RMSE, MAE, MAPE and R².
//!
//! Sums use Neumaier compensation so long series (millions of points)
//! keep full precision.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series lengths differ: {truth} true vs {pred} predicted")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("empty series")]
    Empty,
    #[error("MAPE undefined: true value at index {0} is zero")]
    ZeroTarget(usize),
    #[error("R² undefined: true values are constant")]
    ConstantTarget,
}

/// Paired true / predicted values.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSeries {
    truth: Vec<f64>,
    pred: Vec<f64>,
}

impl EvalSeries {
    pub fn new(truth: Vec<f64>, pred: Vec<f64>) -> Result<Self, MetricsError> {
        if truth.len() != pred.len() {
            return Err(MetricsError::LengthMismatch { truth: truth.len(), pred: pred.len() });
        }
        if truth.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(EvalSeries { truth, pred })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    pub fn pred(&self) -> &[f64] {
        &self.pred
    }

    fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.truth.iter().zip(&self.pred).map(|(y, p)| y - p)
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Percentage of matching labels.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

pub fn rmse(e: &EvalSeries) -> f64 {
    (compensated_sum(e.errors().map(|d| d * d)) / e.len() as f64).sqrt()
}

pub fn mae(e: &EvalSeries) -> f64 {
    compensated_sum(e.errors().map(f64::abs)) / e.len() as f64
}

/// Mean absolute percentage error, in percent. Rejects zero true values.
pub fn mape(e: &EvalSeries) -> Result<f64, MetricsError> {
    if let Some(i) = e.truth.iter().position(|&y| y == 0.0) {
        return Err(MetricsError::ZeroTarget(i));
    }
    let total = compensated_sum(e.truth.iter().zip(&e.pred).map(|(y, p)| ((y - p) / y).abs()));
    Ok(100.0 * total / e.len() as f64)
}

pub fn r_squared(e: &EvalSeries) -> Result<f64, MetricsError> {
    let mean = compensated_sum(e.truth.iter().copied()) / e.len() as f64;
    let total = compensated_sum(e.truth.iter().map(|y| (y - mean) * (y - mean)));
    if total == 0.0 {
        return Err(MetricsError::ConstantTarget);
    }
    let residual = compensated_sum(e.errors().map(|d| d * d));
    Ok(1.0 - residual / total)
}

/// The four forecasting criteria. MAPE and R² are `None` where undefined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForecastMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub r_squared: Option<f64>,
}

impl ForecastMetrics {
    pub fn compute(e: &EvalSeries) -> Self {
        ForecastMetrics { rmse: rmse(e), mae: mae(e), mape: mape(e).ok(), r_squared: r_squared(e).ok() }
    }
}
