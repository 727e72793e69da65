//! Res2Net and gated Res2Net (GRes2Net) blocks for 1-D feature maps.
//!
//! A block expands its input to `n = s × w` channels with a `k = 1`
//! convolution, giving the feature maps `X`, and splits `X` into `s`
//! groups `x_1 … x_s` of `w` channels. The groups are chained:
//!
//! ```text
//! y_1 = x_1
//! y_2 = K_2(x_2)
//! y_i = K_i(x_i + y_{i-1})           ungated,     2 < i ≤ s
//! y_i = K_i(x_i + g_i ⊙ y_{i-1})     gated,       2 < i ≤ s
//! g_i = tanh(a(concat(a(X), a(y_{i-1}), a(x_i))))
//! ```
//!
//! after which `concat(y_1 … y_s)` is compressed back by another `k = 1`
//! convolution. Each inner `a(·)` is its own `k = 1` projection to
//! `gate_channels`, and the outer `a(·)` fuses the three projections to
//! `w` channels, so `g_i` has exactly the shape of `y_{i-1}` and scales it
//! elementwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Bound, Conv1d, ParamStore};
use crate::tape::{GradTape, Var};
use crate::tensor::{Result, Tensor3, TensorError};

/// Nonlinearity applied after each group convolution `K_i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `s`, the number of groups.
    pub groups: usize,
    /// `w`, channels per group.
    pub group_width: usize,
    pub kernel_size: usize,
    pub gate_channels: usize,
    #[serde(default)]
    pub group_activation: Activation,
}

impl BlockConfig {
    /// Kernel size 3, `gate_channels = w`, ReLU after each `K_i`.
    pub fn new(in_channels: usize, out_channels: usize, groups: usize, group_width: usize) -> Self {
        BlockConfig {
            in_channels,
            out_channels,
            groups,
            group_width,
            kernel_size: 3,
            gate_channels: group_width,
            group_activation: Activation::Relu,
        }
    }

    /// `n = s × w`.
    pub fn expanded_channels(&self) -> usize {
        self.groups * self.group_width
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TensorError::Invalid { op: "block config", msg });
        if self.groups < 2 {
            return fail(format!("groups must be at least 2, got {}", self.groups));
        }
        if self.group_width == 0 || self.in_channels == 0 || self.out_channels == 0 || self.gate_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }
}

/// The four `k = 1` convolutions behind one gate `g_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateUnit {
    /// `X` (n channels) to `gate_channels`.
    pub from_full: Conv1d,
    /// `y_{i-1}` (w channels) to `gate_channels`.
    pub from_prev: Conv1d,
    /// `x_i` (w channels) to `gate_channels`.
    pub from_input: Conv1d,
    /// `3 · gate_channels` to `w`.
    pub fuse: Conv1d,
}

impl GateUnit {
    pub fn new(store: &mut ParamStore, name: &str, config: &BlockConfig, rng: &mut impl Rng) -> Self {
        let (n, w, gc) = (config.expanded_channels(), config.group_width, config.gate_channels);
        GateUnit {
            from_full: Conv1d::new(store, &format!("{name}.full"), n, gc, 1, rng),
            from_prev: Conv1d::new(store, &format!("{name}.prev"), w, gc, 1, rng),
            from_input: Conv1d::new(store, &format!("{name}.input"), w, gc, 1, rng),
            fuse: Conv1d::new(store, &format!("{name}.fuse"), 3 * gc, w, 1, rng),
        }
    }

    /// `g_i`, shaped like `y_prev`, every element in (-1, 1).
    pub fn forward(&self, tape: &mut GradTape, params: &Bound, full: Var, prev: Var, input: Var) -> Result<Var> {
        let (fs, ps, is) = (tape.shape(full), tape.shape(prev), tape.shape(input));
        if ps != is || fs.batch != ps.batch || fs.time != ps.time {
            return Err(TensorError::ShapeMismatch { op: "gate_compute", left: ps, right: is });
        }
        if fs.channels != self.from_full.in_channels {
            return Err(TensorError::ShapeMismatch { op: "gate_compute", left: fs, right: ps });
        }
        let a = self.from_full.forward(tape, params, full)?;
        let b = self.from_prev.forward(tape, params, prev)?;
        let c = self.from_input.forward(tape, params, input)?;
        let joined = tape.concat_channels(&[a, b, c])?;
        let fused = self.fuse.forward(tape, params, joined)?;
        Ok(tape.tanh(fused))
    }
}

/// How the hierarchical connection `y_{i-1} → K_i` is treated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gating {
    /// Plain addition of `y_{i-1}`.
    Ungated,
    /// Learned gates `g_i`.
    Gated,
    /// Every gate forced to a constant. `Pinned(1.0)` reduces the gated
    /// block to the ungated one; `Pinned(0.0)` severs the hierarchy.
    Pinned(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub config: BlockConfig,
    pub expand: Conv1d,
    /// `K_2 … K_s`.
    pub group_convs: Vec<Conv1d>,
    /// Gate units for `i = 3 … s`.
    pub gates: Vec<GateUnit>,
    pub compress: Conv1d,
}

/// Intermediate values of one block forward.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub output: Var,
    /// `X`, the expanded feature maps.
    pub full: Var,
    /// `x_1 … x_s`.
    pub inputs: Vec<Var>,
    /// `y_1 … y_s`.
    pub outputs: Vec<Var>,
    /// Effective gates for `i = 3 … s` (absent when ungated).
    pub gates: Vec<Var>,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, config: BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (n, w, k) = (config.expanded_channels(), config.group_width, config.kernel_size);
        let expand = Conv1d::new(store, &format!("{name}.expand"), config.in_channels, n, 1, rng);
        let group_convs =
            (2..=config.groups).map(|i| Conv1d::new(store, &format!("{name}.k{i}"), w, w, k, rng)).collect();
        let gates =
            (3..=config.groups).map(|i| GateUnit::new(store, &format!("{name}.gate{i}"), &config, rng)).collect();
        let compress = Conv1d::new(store, &format!("{name}.compress"), n, config.out_channels, 1, rng);
        Ok(Block { config, expand, group_convs, gates, compress })
    }

    pub fn forward(&self, tape: &mut GradTape, params: &Bound, x: Var, gating: Gating) -> Result<Var> {
        Ok(self.forward_traced(tape, params, x, gating)?.output)
    }

    fn group_conv(&self, tape: &mut GradTape, params: &Bound, i: usize, z: Var) -> Result<Var> {
        let y = self.group_convs[i - 2].forward(tape, params, z)?;
        Ok(match self.config.group_activation {
            Activation::None => y,
            Activation::Relu => tape.relu(y),
        })
    }

    pub fn forward_traced(&self, tape: &mut GradTape, params: &Bound, x: Var, gating: Gating) -> Result<BlockTrace> {
        let xs = tape.shape(x);
        if xs.channels != self.config.in_channels {
            return Err(TensorError::Invalid {
                op: "block forward",
                msg: format!("expected {} input channels, got {}", self.config.in_channels, xs.channels),
            });
        }
        let s = self.config.groups;
        let full = self.expand.forward(tape, params, x)?;
        let inputs = tape.split_channels(full, s)?;
        let mut outputs = Vec::with_capacity(s);
        let mut gates = Vec::new();
        outputs.push(inputs[0]);
        let y2 = self.group_conv(tape, params, 2, inputs[1])?;
        outputs.push(y2);
        for i in 3..=s {
            let (prev, x_i) = (outputs[i - 2], inputs[i - 1]);
            let carried = match gating {
                Gating::Ungated => prev,
                Gating::Gated => {
                    let g = self.gates[i - 3].forward(tape, params, full, prev, x_i)?;
                    gates.push(g);
                    tape.mul(g, prev)?
                }
                Gating::Pinned(v) => {
                    let g = tape.leaf(Tensor3::full(tape.shape(prev), v));
                    gates.push(g);
                    tape.mul(g, prev)?
                }
            };
            let z = tape.add(x_i, carried)?;
            let y = self.group_conv(tape, params, i, z)?;
            outputs.push(y);
        }
        let joined = tape.concat_channels(&outputs)?;
        let output = self.compress.forward(tape, params, joined)?;
        Ok(BlockTrace { output, full, inputs, outputs, gates })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Plain,
    Gated,
}

impl BlockKind {
    pub fn gating(self) -> Gating {
        match self {
            BlockKind::Plain => Gating::Ungated,
            BlockKind::Gated => Gating::Gated,
        }
    }
}

/// A chain of blocks, each either plain or gated.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    stages: Vec<(Block, BlockKind)>,
}

impl Backbone {
    pub fn new(stages: Vec<(Block, BlockKind)>) -> Result<Self> {
        for pair in stages.windows(2) {
            let (a, b) = (&pair[0].0.config, &pair[1].0.config);
            if a.out_channels != b.in_channels {
                return Err(TensorError::Invalid {
                    op: "backbone",
                    msg: format!("block emits {} channels but the next expects {}", a.out_channels, b.in_channels),
                });
            }
        }
        Ok(Backbone { stages })
    }

    /// Builds one block per config, all of the same kind.
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        configs: &[BlockConfig],
        kind: BlockKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stages = configs
            .iter()
            .enumerate()
            .map(|(i, c)| Ok((Block::new(store, &format!("{name}.{i}"), c.clone(), rng)?, kind)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages)
    }

    pub fn stages(&self) -> &[(Block, BlockKind)] {
        &self.stages
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.stages.last().map(|(b, _)| b.config.out_channels)
    }

    pub fn forward(&self, tape: &mut GradTape, params: &Bound, x: Var) -> Result<Var> {
        self.stages.iter().try_fold(x, |h, (block, kind)| block.forward(tape, params, h, kind.gating()))
    }

    /// Same chain with one gating mode forced on every block.
    pub fn forward_with(&self, tape: &mut GradTape, params: &Bound, x: Var, gating: Gating) -> Result<Var> {
        self.stages.iter().try_fold(x, |h, (block, _)| block.forward(tape, params, h, gating))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Shape;

    fn setup(config: BlockConfig, seed: u64) -> (ParamStore, Block) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = Block::new(&mut store, "b", config, &mut rng).unwrap();
        (store, block)
    }

    fn input(shape: Shape, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn run(store: &ParamStore, block: &Block, x: &Tensor3, gating: Gating) -> (GradTape, BlockTrace) {
        let mut tape = GradTape::new();
        let p = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let tr = block.forward_traced(&mut tape, &p, xv, gating).unwrap();
        (tape, tr)
    }

    #[test]
    fn config_validation() {
        assert!(BlockConfig::new(3, 4, 1, 2).validate().is_err());
        assert!(BlockConfig::new(3, 4, 2, 0).validate().is_err());
        let mut even = BlockConfig::new(3, 4, 2, 2);
        even.kernel_size = 2;
        assert!(even.validate().is_err());
        assert_eq!(BlockConfig::new(3, 4, 4, 16).expanded_channels(), 64);
    }

    #[test]
    fn parameter_counts() {
        let (_, block) = setup(BlockConfig::new(3, 5, 4, 2), 0);
        assert_eq!(block.group_convs.len(), 3);
        assert_eq!(block.gates.len(), 2);
        let (_, block) = setup(BlockConfig::new(3, 5, 2, 2), 0);
        assert_eq!(block.group_convs.len(), 1);
        assert!(block.gates.is_empty());
    }

    #[test]
    fn two_groups_has_no_residual() {
        let (store, block) = setup(BlockConfig::new(3, 4, 2, 3), 1);
        let x = input(Shape::new(2, 3, 5), 2);
        let (tape, tr) = run(&store, &block, &x, Gating::Gated);
        assert!(tr.gates.is_empty());
        // compress(concat(x_1, relu(K_2(x_2)))) rebuilt by hand
        let mut t2 = GradTape::new();
        let p = store.bind(&mut t2);
        let xv = t2.leaf(x.clone());
        let full = block.expand.forward(&mut t2, &p, xv).unwrap();
        let x1 = t2.slice_channels(full, 0, 3).unwrap();
        let x2 = t2.slice_channels(full, 3, 3).unwrap();
        let k2 = block.group_convs[0].forward(&mut t2, &p, x2).unwrap();
        let y2 = t2.relu(k2);
        let cat = t2.concat_channels(&[x1, y2]).unwrap();
        let out = block.compress.forward(&mut t2, &p, cat).unwrap();
        assert_eq!(tape.value(tr.output), t2.value(out));
    }

    #[test]
    fn zero_group_convs_pass_only_first_group() {
        let (mut store, block) = setup(BlockConfig::new(3, 6, 3, 2), 3);
        for conv in &block.group_convs {
            store.set(conv.weight, Tensor3::zeros(store.get(conv.weight).shape()));
            store.set(conv.bias, Tensor3::zeros(store.get(conv.bias).shape()));
        }
        let x = input(Shape::new(1, 3, 4), 4);
        for gating in [Gating::Ungated, Gating::Gated] {
            let (tape, tr) = run(&store, &block, &x, gating);
            assert_eq!(tape.value(tr.outputs[0]), tape.value(tr.inputs[0]));
            for y in &tr.outputs[1..] {
                assert!(tape.value(*y).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_gate_unit_gives_zero_gate() {
        let (mut store, block) = setup(BlockConfig::new(2, 2, 3, 2), 5);
        let ids: Vec<_> = block.gates[0]
            .clone()
            .into_convs()
            .into_iter()
            .flat_map(|c| [c.weight, c.bias])
            .collect();
        for id in ids {
            store.set(id, Tensor3::zeros(store.get(id).shape()));
        }
        let (tape, tr) = run(&store, &block, &input(Shape::new(2, 2, 4), 6), Gating::Gated);
        assert!(tape.value(tr.gates[0]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_fuse_bias_opens_gate() {
        let (mut store, block) = setup(BlockConfig::new(2, 2, 3, 2), 7);
        let unit = block.gates[0].clone();
        for c in [&unit.from_full, &unit.from_prev, &unit.from_input, &unit.fuse] {
            store.set(c.weight, Tensor3::zeros(store.get(c.weight).shape()));
            store.set(c.bias, Tensor3::zeros(store.get(c.bias).shape()));
        }
        store.set(unit.fuse.bias, Tensor3::full(store.get(unit.fuse.bias).shape(), 40.0));
        let (tape, tr) = run(&store, &block, &input(Shape::new(1, 2, 4), 8), Gating::Gated);
        assert!(tape.value(tr.gates[0]).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn gate_shape_checks() {
        let (store, block) = setup(BlockConfig::new(2, 2, 3, 2), 9);
        let mut tape = GradTape::new();
        let p = store.bind(&mut tape);
        let full = tape.leaf(Tensor3::zeros(Shape::new(1, 6, 4)));
        let prev = tape.leaf(Tensor3::zeros(Shape::new(1, 2, 4)));
        let wrong = tape.leaf(Tensor3::zeros(Shape::new(1, 2, 5)));
        assert!(block.gates[0].forward(&mut tape, &p, full, prev, wrong).is_err());
        assert!(block.gates[0].forward(&mut tape, &p, prev, prev, prev).is_err());
        assert!(block.gates[0].forward(&mut tape, &p, full, prev, prev).is_ok());
    }

    #[test]
    fn pinned_one_reduces_to_ungated() {
        for seed in 0..10 {
            let (store, block) = setup(BlockConfig::new(3, 4, 4, 2), seed);
            let x = input(Shape::new(2, 3, 6), seed + 100);
            let (t1, a) = run(&store, &block, &x, Gating::Pinned(1.0));
            let (t2, b) = run(&store, &block, &x, Gating::Ungated);
            assert_eq!(t1.value(a.output), t2.value(b.output));
        }
    }

    #[test]
    fn pinned_zero_severs_hierarchy() {
        let (store, block) = setup(BlockConfig::new(3, 4, 4, 2), 11);
        let x = input(Shape::new(1, 3, 6), 12);
        let (tape, tr) = run(&store, &block, &x, Gating::Pinned(0.0));
        for i in 3..=4 {
            let mut t2 = GradTape::new();
            let p = store.bind(&mut t2);
            let xi = t2.leaf(tape.value(tr.inputs[i - 1]).clone());
            let k = block.group_convs[i - 2].forward(&mut t2, &p, xi).unwrap();
            let y = t2.relu(k);
            assert_eq!(tape.value(tr.outputs[i - 1]), t2.value(y));
        }
    }

    #[test]
    fn learned_gates_bounded_and_shapes_preserved() {
        let (store, block) = setup(BlockConfig::new(3, 7, 4, 3), 13);
        let x = input(Shape::new(2, 3, 9), 14).map(|v| v * 10.0);
        let (tape, tr) = run(&store, &block, &x, Gating::Gated);
        assert_eq!(tr.gates.len(), 2);
        for g in &tr.gates {
            assert_eq!(tape.shape(*g), Shape::new(2, 3, 9));
            assert!(tape.value(*g).data().iter().all(|v| v.abs() < 1.0));
        }
        assert_eq!(tape.shape(tr.output), Shape::new(2, 7, 9));
    }

    #[test]
    fn block_rejects_wrong_channels() {
        let (store, block) = setup(BlockConfig::new(3, 4, 2, 2), 0);
        let mut tape = GradTape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(Tensor3::zeros(Shape::new(1, 5, 4)));
        assert!(block.forward(&mut tape, &p, x, Gating::Ungated).is_err());
    }

    #[test]
    fn backbone_chain() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Block::new(&mut store, "a", BlockConfig::new(3, 8, 2, 2), &mut rng).unwrap();
        let b = Block::new(&mut store, "b", BlockConfig::new(5, 8, 2, 2), &mut rng).unwrap();
        assert!(Backbone::new(vec![(a.clone(), BlockKind::Gated), (b, BlockKind::Gated)]).is_err());

        let empty = Backbone::new(vec![]).unwrap();
        let mut tape = GradTape::new();
        let p = store.bind(&mut tape);
        let x = tape.leaf(input(Shape::new(1, 3, 5), 1));
        assert_eq!(empty.forward(&mut tape, &p, x).unwrap(), x);

        let one = Backbone::new(vec![(a.clone(), BlockKind::Gated)]).unwrap();
        let y1 = one.forward(&mut tape, &p, x).unwrap();
        let y2 = a.forward(&mut tape, &p, x, Gating::Gated).unwrap();
        assert_eq!(tape.value(y1), tape.value(y2));
    }

    impl GateUnit {
        fn into_convs(self) -> [Conv1d; 4] {
            [self.from_full, self.from_prev, self.from_input, self.fuse]
        }
    }
}
