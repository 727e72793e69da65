use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::tape::{GradTape, Var};
use crate::tensor::{Result, Shape, TensorError};

/// Same-padded 1-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(in_channels >= 1 && out_channels >= 1 && kernel_size >= 1, "degenerate conv {name}");
        let fan_in = in_channels * kernel_size;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            Shape::new(out_channels, in_channels, kernel_size),
            fan_in,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), Shape::new(1, out_channels, 1), fan_in, rng);
        Conv1d { weight, bias, in_channels, out_channels, kernel_size }
    }

    pub fn forward(&self, tape: &mut GradTape, params: &Bound, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.channels != self.in_channels {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: format!("expected {} input channels, got {}", self.in_channels, xs.channels),
            });
        }
        tape.conv1d(x, params.var(self.weight), Some(params.var(self.bias)))
    }
}

/// Fully connected layer on `B × in × 1` feature batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let mut d = Self::without_bias(store, name, in_features, out_features, rng);
        d.bias = Some(store.add_uniform(format!("{name}.bias"), Shape::new(1, out_features, 1), in_features, rng));
        d
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight =
            store.add_uniform(format!("{name}.weight"), Shape::new(out_features, in_features, 1), in_features, rng);
        Dense { weight, bias: None, in_features, out_features }
    }

    pub fn forward(&self, tape: &mut GradTape, params: &Bound, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.channels != self.in_features || xs.time != 1 {
            return Err(TensorError::Invalid {
                op: "dense",
                msg: format!("expected B×{}×1 features, got {xs}", self.in_features),
            });
        }
        tape.dense(x, params.var(self.weight), self.bias.map(|b| params.var(b)))
    }
}
