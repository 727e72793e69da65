//! Complete networks: a feature-extraction body followed by global average
//! pooling and two fully connected layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, Bound, Dense, LstmStack, Mode, ParamStore};
use crate::res2net::{Backbone, BlockConfig, BlockKind};
use crate::tape::{GradTape, Var};
use crate::tensor::{Result, Tensor3, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gres2net,
    Res2net,
    Lstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gres2net => "gres2net",
            ModelKind::Res2net => "res2net",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gres2net" => Ok(ModelKind::Gres2net),
            "res2net" => Ok(ModelKind::Res2net),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(format!("unknown model `{other}` (expected gres2net, res2net or lstm)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Task {
    Classification { classes: usize },
    Forecasting { horizon: usize },
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Classification { classes } => classes,
            Task::Forecasting { horizon } => horizon,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig { hidden: 64, layers: 8, bidirectional: true }
    }
}

/// Uniform channel plan for a stack of blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockPlan {
    pub blocks: usize,
    pub groups: usize,
    pub group_width: usize,
    pub kernel_size: usize,
    pub out_channels: usize,
    /// Defaults to `group_width` when absent.
    pub gate_channels: Option<usize>,
    pub group_activation: crate::res2net::Activation,
}

impl Default for BlockPlan {
    fn default() -> Self {
        BlockPlan {
            blocks: 2,
            groups: 4,
            group_width: 16,
            kernel_size: 3,
            out_channels: 64,
            gate_channels: None,
            group_activation: Default::default(),
        }
    }
}

impl BlockPlan {
    pub fn configs(&self, in_channels: usize) -> Vec<BlockConfig> {
        let mut width = in_channels;
        (0..self.blocks)
            .map(|_| {
                let mut c = BlockConfig::new(width, self.out_channels, self.groups, self.group_width);
                c.kernel_size = self.kernel_size;
                c.gate_channels = self.gate_channels.unwrap_or(self.group_width);
                c.group_activation = self.group_activation;
                width = self.out_channels;
                c
            })
            .collect()
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub task: Task,
    pub input_channels: usize,
    pub blocks: Vec<BlockConfig>,
    pub lstm: LstmConfig,
    pub head_hidden: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, task: Task, input_channels: usize, plan: &BlockPlan, init_seed: u64) -> Self {
        ModelSpec {
            kind,
            task,
            input_channels,
            blocks: plan.configs(input_channels),
            lstm: LstmConfig::default(),
            head_hidden: 64,
            init_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Blocks(Backbone),
    Lstm(LstmStack),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    body: Body,
    hidden: Dense,
    output: Dense,
}

impl Model {
    /// Builds the structure and draws initial weights from `spec.init_seed`.
    ///
    /// Res2Net and GRes2Net models built from the same spec differ only in
    /// how blocks are evaluated; their weights, gate units included, are
    /// identical.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.input_channels == 0 || spec.task.outputs() == 0 || spec.head_hidden == 0 {
            return Err(TensorError::Invalid { op: "model", msg: "channel and output counts must be positive".into() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = ParamStore::new();
        let (body, features) = match spec.kind {
            ModelKind::Gres2net | ModelKind::Res2net => {
                let kind = if spec.kind == ModelKind::Gres2net { BlockKind::Gated } else { BlockKind::Plain };
                if let Some(first) = spec.blocks.first() {
                    if first.in_channels != spec.input_channels {
                        return Err(TensorError::Invalid {
                            op: "model",
                            msg: format!(
                                "first block expects {} channels, input has {}",
                                first.in_channels, spec.input_channels
                            ),
                        });
                    }
                }
                let bb = Backbone::build(&mut params, "block", &spec.blocks, kind, &mut rng)?;
                let width = bb.out_channels().unwrap_or(spec.input_channels);
                (Body::Blocks(bb), width)
            }
            ModelKind::Lstm => {
                let l = &spec.lstm;
                if l.hidden == 0 || l.layers == 0 {
                    return Err(TensorError::Invalid { op: "model", msg: "lstm needs hidden ≥ 1 and layers ≥ 1".into() });
                }
                let stack = LstmStack::new(&mut params, "lstm", spec.input_channels, l.hidden, l.layers, l.bidirectional, &mut rng);
                let width = stack.output_size();
                (Body::Lstm(stack), width)
            }
        };
        let hidden = Dense::new(&mut params, "head.hidden", features, spec.head_hidden, &mut rng);
        let output = Dense::new(&mut params, "head.output", spec.head_hidden, spec.task.outputs(), &mut rng);
        Ok(Model { spec, params, body, hidden, output })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces every parameter; names and shapes must match.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.names() != self.params.names() {
            return Err(TensorError::Invalid { op: "load_params", msg: "parameter names differ".into() });
        }
        for (a, b) in store.tensors().iter().zip(self.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch { op: "load_params", left: b.shape(), right: a.shape() });
            }
        }
        self.params = store;
        Ok(())
    }

    pub fn backbone(&self) -> Option<&Backbone> {
        match &self.body {
            Body::Blocks(b) => Some(b),
            Body::Lstm(_) => None,
        }
    }

    /// Maps `B × C × T` inputs to `B × outputs × 1` logits or forecasts.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        params: &Bound,
        x: Var,
        mode: Mode,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.channels != self.spec.input_channels {
            return Err(TensorError::Invalid {
                op: "model",
                msg: format!("expected {} input channels, found {}", self.spec.input_channels, xs.channels),
            });
        }
        let features = match &self.body {
            Body::Blocks(bb) => bb.forward(tape, params, x)?,
            Body::Lstm(stack) => stack.forward(tape, params, x)?,
        };
        let pooled = nn::global_avg_pool(tape, features);
        let h = self.hidden.forward(tape, params, pooled)?;
        let h = tape.relu(h);
        let h = nn::dropout(tape, h, dropout, mode, rng)?;
        self.output.forward(tape, params, h)
    }

    /// Eval-mode forward on a concrete batch.
    pub fn infer(&self, x: &Tensor3) -> Result<Tensor3> {
        let mut tape = GradTape::new();
        let bound = self.params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let y = self.forward(&mut tape, &bound, xv, Mode::Eval, 0.0, &mut unused)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn small_plan() -> BlockPlan {
        BlockPlan { blocks: 2, groups: 3, group_width: 2, out_channels: 5, ..Default::default() }
    }

    #[test]
    fn output_shapes() {
        let x = Tensor3::full(Shape::new(3, 4, 7), 0.3);
        for kind in [ModelKind::Gres2net, ModelKind::Res2net, ModelKind::Lstm] {
            let mut spec = ModelSpec::new(kind, Task::Classification { classes: 3 }, 4, &small_plan(), 1);
            spec.lstm = LstmConfig { hidden: 3, layers: 2, bidirectional: true };
            let m = Model::new(spec).unwrap();
            assert_eq!(m.infer(&x).unwrap().shape(), Shape::new(3, 3, 1));
        }
    }

    #[test]
    fn plain_and_gated_share_initial_weights() {
        let task = Task::Forecasting { horizon: 2 };
        let a = Model::new(ModelSpec::new(ModelKind::Gres2net, task, 3, &small_plan(), 9)).unwrap();
        let b = Model::new(ModelSpec::new(ModelKind::Res2net, task, 3, &small_plan(), 9)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let m = Model::new(ModelSpec::new(ModelKind::Gres2net, Task::Forecasting { horizon: 1 }, 3, &small_plan(), 0))
            .unwrap();
        assert!(m.infer(&Tensor3::zeros(Shape::new(1, 2, 5))).is_err());
    }

    #[test]
    fn load_params_checks_names() {
        let spec = ModelSpec::new(ModelKind::Gres2net, Task::Forecasting { horizon: 1 }, 3, &small_plan(), 0);
        let mut m = Model::new(spec.clone()).unwrap();
        let other = Model::new(ModelSpec { kind: ModelKind::Lstm, ..spec }).unwrap();
        assert!(m.load_params(other.params().clone()).is_err());
    }
}
