//! Tabular time-series ingestion and preparation.
//!
//! A [`Schema`] names the column roles of a CSV file. Loaded tables become
//! samples either by windowing (forecasting, or classification without a
//! sequence column) or by grouping rows that share a sequence id. Samples
//! are `1 × C × T` tensors; a batch of unequal lengths is right-padded with
//! zeros by [`crate::tensor::stack_batch`].

mod csv;
mod synthetic;
mod window;

use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Task;
use crate::tensor::{Shape, Tensor3};

pub use self::csv::{load_csv, parse_csv, write_table, RawTable, Schema, TaskKind};
pub use self::synthetic::{make_synthetic, make_synthetic_with, SynthSpec, SynthTask, SyntheticData};
pub use self::window::{make_windows, window_starts, WindowSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("line {line}: expected {expected} fields, found {found}")]
    Ragged { line: u64, expected: usize, found: usize },
    #[error("line {line}, column `{column}`: missing value")]
    MissingValue { line: u64, column: String },
    #[error("line {line}, column `{column}`: cannot parse `{value}` as a number")]
    Parse { line: u64, column: String, value: String },
    #[error("line {line}, column `{column}`: label `{value}` is not a non-negative integer")]
    BadLabel { line: u64, column: String, value: String },
    #[error("series of length {len} is shorter than the {needed} steps a window needs")]
    TooShort { len: usize, needed: usize },
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("schema: {0}")]
    Schema(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 × C × T`.
    pub x: Tensor3,
    pub target: Target,
}

/// Mean and population standard deviation of one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = crate::metrics::compensated_sum(v.iter().copied()) / n;
        let var = crate::metrics::compensated_sum(v.iter().map(|x| (x - mean) * (x - mean))) / n;
        Some(ChannelStats { mean, std: var.sqrt() })
    }

    /// Divisor used for scaling; a constant channel is only centered.
    pub fn scale(&self) -> f64 {
        if self.std > 0.0 {
            self.std
        } else {
            1.0
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale()
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale() + self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub features: Vec<ChannelStats>,
    /// Present for forecasting.
    pub target: Option<ChannelStats>,
}

impl Normalization {
    pub fn apply_input(&self, x: &Tensor3) -> Tensor3 {
        Tensor3::from_fn(x.shape(), |b, c, t| self.features[c].apply(x.at(b, c, t)))
    }
}

/// Train and validation samples of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub task: Task,
    pub channels: usize,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    /// Set once [`DatasetSplit::normalize`] has run.
    pub normalization: Option<Normalization>,
}

impl DatasetSplit {
    pub fn new(task: Task, channels: usize, train: Vec<Sample>, validation: Vec<Sample>) -> Result<Self> {
        for (part, samples) in [("train", &train), ("validation", &validation)] {
            for (i, s) in samples.iter().enumerate() {
                let sh = s.x.shape();
                if sh.batch != 1 || sh.channels != channels {
                    return Err(DataError::Invalid(format!(
                        "{part} sample {i} has shape {sh}, expected 1×{channels}×T"
                    )));
                }
                match (&s.target, task) {
                    (Target::Class(c), Task::Classification { classes }) if *c < classes => {}
                    (Target::Values(v), Task::Forecasting { horizon }) if v.len() == horizon => {}
                    _ => return Err(DataError::Invalid(format!("{part} sample {i} has a target unfit for the task"))),
                }
            }
        }
        Ok(DatasetSplit { task, channels, train, validation, normalization: None })
    }

    /// Per-channel z-score with statistics from the train partition only.
    /// Forecasting targets are scaled with the train target statistics.
    pub fn normalize(&self) -> Result<DatasetSplit> {
        if self.train.is_empty() {
            return Err(DataError::EmptyPartition("train"));
        }
        let features: Vec<ChannelStats> = (0..self.channels)
            .map(|c| {
                ChannelStats::of(self.train.iter().flat_map(|s| s.x.row(0, c).iter().copied()))
                    .expect("train is non-empty")
            })
            .collect();
        let target = match self.task {
            Task::Forecasting { .. } => ChannelStats::of(self.train.iter().flat_map(|s| match &s.target {
                Target::Values(v) => v.clone(),
                Target::Class(_) => Vec::new(),
            })),
            Task::Classification { .. } => None,
        };
        let norm = Normalization { features, target };
        let apply = |s: &Sample| Sample {
            x: norm.apply_input(&s.x),
            target: match (&s.target, &norm.target) {
                (Target::Values(v), Some(t)) => Target::Values(v.iter().map(|&y| t.apply(y)).collect()),
                (other, _) => other.clone(),
            },
        };
        Ok(DatasetSplit {
            task: self.task,
            channels: self.channels,
            train: self.train.iter().map(apply).collect(),
            validation: self.validation.iter().map(apply).collect(),
            normalization: Some(norm),
        })
    }

    /// Number of samples present in both partitions, compared by content.
    pub fn overlap(&self) -> usize {
        let train: HashSet<u64> = self.train.iter().map(sample_hash).collect();
        self.validation.iter().filter(|s| train.contains(&sample_hash(s))).count()
    }
}

fn sample_hash(s: &Sample) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    let sh: Shape = s.x.shape();
    (sh.channels, sh.time).hash(&mut h);
    for v in s.x.data() {
        v.to_bits().hash(&mut h);
    }
    match &s.target {
        Target::Class(c) => (0u8, *c).hash(&mut h),
        Target::Values(v) => {
            1u8.hash(&mut h);
            for y in v {
                y.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

/// Config-level data description, shared by the CLI and tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub schema: PathBuf,
    pub train: PathBuf,
    /// When absent, the last `validation_fraction` of `train` is held out.
    pub validation: Option<PathBuf>,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.2
}

/// Converts loaded tables into samples according to `schema`.
pub fn build_split(schema: &Schema, train: &RawTable, validation: &RawTable) -> Result<DatasetSplit> {
    let task = schema.resolve_task(&[train, validation])?;
    let channels = schema.features.len();
    let train_samples = table_samples(schema, task, train)?;
    let val_samples = table_samples(schema, task, validation)?;
    DatasetSplit::new(task, channels, train_samples, val_samples)
}

/// Samples of one table. Tables without the target column yield inputs only
/// via [`table_inputs`].
pub fn table_samples(schema: &Schema, task: Task, table: &RawTable) -> Result<Vec<Sample>> {
    match task {
        Task::Forecasting { .. } => {
            let target = table.target.as_ref().ok_or_else(|| DataError::Schema("target column required".into()))?;
            make_windows(&table.columns, target, &schema.window)
        }
        Task::Classification { .. } => {
            let labels = table.labels.as_ref().ok_or_else(|| DataError::Schema("label column required".into()))?;
            let inputs = table_inputs(schema, table)?;
            let label_at = classification_label_rows(schema, table)?;
            Ok(inputs.into_iter().zip(label_at).map(|(x, row)| Sample { x, target: Target::Class(labels[row]) }).collect())
        }
    }
}

/// Model inputs of one table, in the order [`table_samples`] produces them.
/// Forecasting windows here need no future target values.
pub fn table_inputs(schema: &Schema, table: &RawTable) -> Result<Vec<Tensor3>> {
    let cols = &table.columns;
    let slice = |start: usize, len: usize| {
        let c = cols.len();
        let mut data = Vec::with_capacity(c * len);
        for col in cols {
            data.extend_from_slice(&col[start..start + len]);
        }
        Tensor3::new(Shape::new(1, c, len), data).map_err(|e| DataError::Invalid(e.to_string()))
    };
    match (schema.task, &table.sequence) {
        (TaskKind::Classification, Some(_)) => sequence_runs(table)?.into_iter().map(|(s, len)| slice(s, len)).collect(),
        (kind, _) => {
            let horizon = if kind == TaskKind::Forecasting && table.target.is_some() { schema.window.horizon } else { 0 };
            window_starts(table.len(), schema.window.history, horizon, schema.window.stride)?
                .map(|s| slice(s, schema.window.history))
                .collect()
        }
    }
}

/// Row whose label each classification sample carries.
fn classification_label_rows(schema: &Schema, table: &RawTable) -> Result<Vec<usize>> {
    let labels = table.labels.as_ref().ok_or_else(|| DataError::Schema("label column required".into()))?;
    match &table.sequence {
        Some(_) => sequence_runs(table)?
            .into_iter()
            .map(|(start, len)| {
                if labels[start..start + len].iter().any(|&l| l != labels[start]) {
                    Err(DataError::Invalid(format!("label changes inside the sequence starting at data row {}", start + 1)))
                } else {
                    Ok(start)
                }
            })
            .collect(),
        None => {
            let h = schema.window.history;
            Ok(window_starts(table.len(), h, 0, schema.window.stride)?.map(|s| s + h - 1).collect())
        }
    }
}

/// `(start, len)` of each run of consecutive rows sharing a sequence id.
fn sequence_runs(table: &RawTable) -> Result<Vec<(usize, usize)>> {
    let ids = table.sequence.as_ref().ok_or_else(|| DataError::Schema("sequence column required".into()))?;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut seen = HashSet::new();
    for (i, id) in ids.iter().enumerate() {
        match runs.last_mut() {
            Some((start, len)) if ids[*start] == *id => *len += 1,
            _ => {
                if !seen.insert(id.as_str()) {
                    return Err(DataError::Invalid(format!("sequence `{id}` is not contiguous (data row {})", i + 1)));
                }
                runs.push((i, 1));
            }
        }
    }
    Ok(runs)
}

/// Holds out the last `fraction` of rows as a validation table.
pub fn split_chronological(table: &RawTable, fraction: f64) -> Result<(RawTable, RawTable)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Invalid(format!("validation fraction {fraction} must lie in (0, 1)")));
    }
    let n = table.len();
    let mut cut = ((1.0 - fraction) * n as f64).round() as usize;
    if let Some(ids) = &table.sequence {
        while cut > 0 && cut < n && ids[cut] == ids[cut - 1] {
            cut += 1;
        }
    }
    Ok((table.rows(0..cut), table.rows(cut..n)))
}
