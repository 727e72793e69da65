//! Generated tasks with known structure.
//!
//! Classification: channel 0 is a random multi-sine `z(t)`, channel 1 is
//! `±r·z(t)` and channel 2 an unrelated sine, each with Gaussian noise. The
//! label is the sign linking channels 0 and 1, so every channel has the same
//! marginal distribution in both classes and only the cross-channel
//! interaction is informative.
//!
//! Forecasting: three channels mix the same slow sines around a positive
//! offset; observations add noise of standard deviation `noise`. The target
//! is the next observation of channel 0, so the noiseless generator is the
//! best possible predictor and its RMSE is `noise`.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{build_split, DatasetSplit, RawTable, Result, Schema, TaskKind, WindowSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Classification,
    Forecasting,
}

impl std::str::FromStr for SynthTask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classification" => Ok(SynthTask::Classification),
            "forecasting" => Ok(SynthTask::Forecasting),
            other => Err(format!("unknown synthetic task `{other}` (expected classification or forecasting)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub task: SynthTask,
    /// Classification: train samples per class. Forecasting: train series length.
    pub size: usize,
    /// Classification: validation samples per class. Forecasting: validation series length.
    pub validation_size: usize,
    /// Classification sequence length.
    pub length: usize,
    /// Standard deviation of the injected Gaussian noise.
    pub noise: f64,
    pub window: WindowSpec,
}

impl SynthSpec {
    pub fn new(task: SynthTask, size: usize) -> Self {
        match task {
            SynthTask::Classification => SynthSpec {
                task,
                size,
                validation_size: (size / 2).max(2),
                length: 32,
                noise: 0.1,
                window: WindowSpec::default(),
            },
            SynthTask::Forecasting => {
                let window = WindowSpec { history: 16, horizon: 1, stride: 1 };
                SynthSpec {
                    task,
                    size,
                    validation_size: (size / 4).max(window.history + window.horizon + 1),
                    length: 0,
                    noise: 0.1,
                    window,
                }
            }
        }
    }
}

/// Generated tables plus the schema that reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SynthSpec,
    pub schema: Schema,
    pub train: RawTable,
    pub validation: RawTable,
    /// Forecasting only: noiseless target series aligned with each table.
    pub clean: Option<(Vec<f64>, Vec<f64>)>,
}

impl SyntheticData {
    pub fn split(&self) -> Result<DatasetSplit> {
        build_split(&self.schema, &self.train, &self.validation)
    }
}

pub fn make_synthetic(task: SynthTask, seed: u64, size: usize) -> Result<SyntheticData> {
    make_synthetic_with(&SynthSpec::new(task, size), seed)
}

pub fn make_synthetic_with(spec: &SynthSpec, seed: u64) -> Result<SyntheticData> {
    if spec.size < 2 || spec.validation_size < 2 || !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(super::DataError::Invalid("synthetic sizes must be ≥ 2 and noise finite and ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.task {
        SynthTask::Classification => classification(spec, &mut rng),
        SynthTask::Forecasting => forecasting(spec, &mut rng),
    }
}

const CHANNELS: [&str; 3] = ["x0", "x1", "x2"];

fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn classification(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticData> {
    if spec.length < 1 {
        return Err(super::DataError::Invalid("sequence length must be ≥ 1".into()));
    }
    let schema = Schema {
        task: TaskKind::Classification,
        features: CHANNELS.iter().map(|s| s.to_string()).collect(),
        label: Some("label".into()),
        target: None,
        timestamp: None,
        sequence: Some("sequence".into()),
        classes: Some(2),
        forward_fill: false,
        window: WindowSpec::default(),
    };
    let mut table = |per_class: usize, prefix: &str| {
        let mut t = RawTable {
            features: schema.features.clone(),
            columns: vec![Vec::new(); 3],
            labels: Some(Vec::new()),
            sequence: Some(Vec::new()),
            ..Default::default()
        };
        for i in 0..2 * per_class {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let z = random_sines(rng, 2, 4.0, 16.0);
            let other = random_sines(rng, 1, 4.0, 16.0);
            let r = rng.random_range(0.5..1.5);
            for step in 0..spec.length {
                let t_ = step as f64;
                let zt = z(t_);
                t.columns[0].push(zt + spec.noise * gauss(rng));
                t.columns[1].push(sign * r * zt + spec.noise * gauss(rng));
                t.columns[2].push(other(t_) + spec.noise * gauss(rng));
                t.labels.as_mut().unwrap().push(label);
                t.sequence.as_mut().unwrap().push(format!("{prefix}{i}"));
            }
        }
        t
    };
    let train = table(spec.size, "t");
    let validation = table(spec.validation_size, "v");
    Ok(SyntheticData { spec: spec.clone(), schema, train, validation, clean: None })
}

/// Sum of `count` sines with random amplitude in [0.5, 1], period in
/// `[min_period, max_period]` and phase.
fn random_sines(rng: &mut impl Rng, count: usize, min_period: f64, max_period: f64) -> impl Fn(f64) -> f64 {
    let parts: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| (rng.random_range(0.5..1.0), rng.random_range(min_period..max_period), rng.random_range(0.0..TAU)))
        .collect();
    move |t| parts.iter().map(|(a, p, ph)| a * (TAU * t / p + ph).sin()).sum()
}

fn forecasting(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticData> {
    spec.window.validate()?;
    let schema = Schema {
        task: TaskKind::Forecasting,
        features: CHANNELS.iter().map(|s| s.to_string()).collect(),
        label: None,
        target: Some("x0".into()),
        timestamp: Some("t".into()),
        sequence: None,
        classes: None,
        forward_fill: false,
        window: spec.window,
    };
    let latents: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(40.0..120.0), rng.random_range(0.0..TAU))).collect();
    let mixing: Vec<[f64; 3]> =
        (0..3).map(|_| [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)]).collect();
    let clean_at = |c: usize, t: f64| -> f64 {
        3.0 + latents.iter().zip(&mixing[c]).map(|((p, ph), m)| m * (TAU * t / p + ph).sin()).sum::<f64>()
    };
    let mut table = |range: std::ops::Range<usize>| {
        let mut t = RawTable {
            features: schema.features.clone(),
            columns: vec![Vec::new(); 3],
            timestamps: Some(Vec::new()),
            ..Default::default()
        };
        let mut clean = Vec::new();
        for step in range {
            let time = step as f64;
            for (c, col) in t.columns.iter_mut().enumerate() {
                let v = clean_at(c, time);
                if c == 0 {
                    clean.push(v);
                }
                col.push(v + spec.noise * gauss(rng));
            }
            t.timestamps.as_mut().unwrap().push(step.to_string());
        }
        t.target = Some(t.columns[0].clone());
        (t, clean)
    };
    let (train, clean_train) = table(0..spec.size);
    let (validation, clean_val) = table(spec.size..spec.size + spec.validation_size);
    Ok(SyntheticData { spec: spec.clone(), schema, train, validation, clean: Some((clean_train, clean_val)) })
}
