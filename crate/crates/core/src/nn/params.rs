use rand::Rng;

use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::{Shape, Tensor3};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of every learnable tensor of a model.
///
/// Layers hold [`ParamId`]s into the store. The store order is fixed at
/// construction, which makes it the canonical order for optimizer state
/// and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor3>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor3) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in ±sqrt(1/fan_in).
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: Shape, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let value = Tensor3::from_fn(shape, |_, _, _| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor3 {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor3) {
        assert_eq!(self.tensors[id.0].shape(), value.shape(), "parameter {} shape changed", self.names[id.0]);
        self.tensors[id.0] = value;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor3] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor3] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.shape().len()).sum()
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut GradTape) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }
}

/// Parameters of one store recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor3> {
        self.vars.iter().map(|&v| g.get(v)).collect()
    }
}
