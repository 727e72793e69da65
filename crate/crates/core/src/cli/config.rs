use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::data::{DataPaths, Schema, SynthTask, TaskKind};
use crate::model::{BlockPlan, LstmConfig, ModelKind, ModelSpec, Task};
use crate::train::TrainConfig;

/// A complete run, stored as TOML. Relative paths resolve against the
/// directory of the config file.
///
/// ```toml
/// seed = 7
/// out = "runs/gres2net"
///
/// [model]
/// kind = "gres2net"
///
/// [model.blocks]
/// blocks = 2
/// groups = 4
/// group_width = 16
///
/// [train]
/// epochs = 500
///
/// [data]
/// schema = "schema.toml"
/// train = "train.csv"
/// validation = "validation.csv"
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds both weight initialization and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataPaths,
    #[serde(skip)]
    base: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub head_hidden: usize,
    pub blocks: BlockPlan,
    pub lstm: LstmConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { kind: ModelKind::Gres2net, head_hidden: 64, blocks: BlockPlan::default(), lstm: LstmConfig::default() }
    }
}

/// [`TrainConfig`] minus the seed, which lives at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub dropout: f64,
    pub eval_repeats: usize,
    pub retrain: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr0: d.lr0,
            epochs: d.epochs,
            decay_every: d.decay_every,
            decay_factor: d.decay_factor,
            batch_size: d.batch_size,
            dropout: d.dropout,
            eval_repeats: d.eval_repeats,
            retrain: d.retrain,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.base = base.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let cfg = Self::from_toml(&text, &base).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// `out`, resolved like the data paths.
    pub fn out_dir(&self) -> Option<PathBuf> {
        self.out.as_ref().map(|o| self.resolve(o))
    }

    /// Data paths resolved against the config location.
    pub fn data_paths(&self) -> DataPaths {
        DataPaths {
            schema: self.resolve(&self.data.schema),
            train: self.resolve(&self.data.train),
            validation: self.data.validation.as_ref().map(|v| self.resolve(v)),
            validation_fraction: self.data.validation_fraction,
        }
    }

    fn check_paths(&self) -> Result<(), CliError> {
        let p = self.data_paths();
        for (key, path) in [("data.schema", Some(&p.schema)), ("data.train", Some(&p.train)), ("data.validation", p.validation.as_ref())] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(CliError::Config(format!("`{key}`: {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr0: t.lr0,
            epochs: t.epochs,
            decay_every: t.decay_every,
            decay_factor: t.decay_factor,
            batch_size: t.batch_size,
            dropout: t.dropout,
            seed: self.seed,
            eval_repeats: t.eval_repeats,
            retrain: t.retrain,
        }
    }

    /// Task a schema fixes before any data is read; classification
    /// schemas without `classes` need the data to decide.
    pub fn schema_task(schema: &Schema) -> Option<Task> {
        match schema.task {
            TaskKind::Classification => schema.classes.map(|classes| Task::Classification { classes }),
            TaskKind::Forecasting => Some(Task::Forecasting { horizon: schema.window.horizon }),
        }
    }

    pub fn model_spec(&self, task: Task, input_channels: usize) -> Result<ModelSpec, CliError> {
        let m = &self.model;
        if m.kind != ModelKind::Lstm && m.blocks.blocks == 0 {
            return Err(CliError::Config("`model.blocks.blocks` must be ≥ 1 for residual models".into()));
        }
        let mut spec = ModelSpec::new(m.kind, task, input_channels, &m.blocks, self.seed);
        spec.lstm = m.lstm.clone();
        spec.head_hidden = m.head_hidden;
        for (i, b) in spec.blocks.iter().enumerate() {
            b.validate().map_err(|e| CliError::Config(format!("`model.blocks` (block {i}): {e}")))?;
        }
        crate::model::Model::new(spec.clone()).map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(spec)
    }

    /// Config written next to a generated synthetic dataset.
    pub fn for_synthetic(task: SynthTask, seed: u64, kind: ModelKind) -> Self {
        let mut model = ModelSection { kind, ..Default::default() };
        let mut train = TrainSection { epochs: 200, ..Default::default() };
        if task == SynthTask::Forecasting {
            model.blocks.group_width = 8;
            model.blocks.out_channels = 32;
            train.epochs = 100;
        }
        RunConfig {
            seed,
            out: Some("run".into()),
            model,
            train,
            data: DataPaths {
                schema: "schema.toml".into(),
                train: "train.csv".into(),
                validation: Some("validation.csv".into()),
                validation_fraction: 0.2,
            },
            base: PathBuf::new(),
        }
    }
}
