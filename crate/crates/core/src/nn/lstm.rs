//! LSTM cell and (bi)directional stacks, the recurrent baseline.
//!
//! One step computes
//!
//! ```text
//! g = tanh(W_gx x + W_gh h + b_g)
//! i = σ(W_ix x + W_ih h + b_i)
//! f = σ(W_fx x + W_fh h + b_f)
//! o = σ(W_ox x + W_oh h + b_o)
//! s = g ⊙ i + s_prev ⊙ f
//! h = tanh(s) ⊙ o
//! ```

use rand::Rng;

use super::layers::Dense;
use super::params::{Bound, ParamStore};
use crate::tape::{GradTape, Var};
use crate::tensor::{Result, Shape, Tensor3, TensorError};

/// Input and recurrent projections of one gate; the bias lives on `input`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    pub input: Dense,
    pub hidden: Dense,
}

impl GateWeights {
    fn new(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        let input = Dense::new(store, &format!("{name}.x"), input_size, hidden_size, rng);
        let hidden = Dense::without_bias(store, &format!("{name}.h"), hidden_size, hidden_size, rng);
        GateWeights { input, hidden }
    }

    fn preactivation(&self, tape: &mut GradTape, params: &Bound, x: Var, h: Var) -> Result<Var> {
        let a = self.input.forward(tape, params, x)?;
        let b = self.hidden.forward(tape, params, h)?;
        tape.add(a, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub candidate: GateWeights,
    pub input_gate: GateWeights,
    pub forget_gate: GateWeights,
    pub output_gate: GateWeights,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub s: Var,
}

/// Everything one step produced, gates included.
#[derive(Clone, Copy, Debug)]
pub struct LstmStep {
    pub state: LstmState,
    pub g: Var,
    pub i: Var,
    pub f: Var,
    pub o: Var,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut impl Rng) -> Self {
        LstmCell {
            input_size,
            hidden_size,
            candidate: GateWeights::new(store, &format!("{name}.g"), input_size, hidden_size, rng),
            input_gate: GateWeights::new(store, &format!("{name}.i"), input_size, hidden_size, rng),
            forget_gate: GateWeights::new(store, &format!("{name}.f"), input_size, hidden_size, rng),
            output_gate: GateWeights::new(store, &format!("{name}.o"), input_size, hidden_size, rng),
        }
    }

    pub fn zero_state(&self, tape: &mut GradTape, batch: usize) -> LstmState {
        let shape = Shape::new(batch, self.hidden_size, 1);
        LstmState { h: tape.leaf(Tensor3::zeros(shape)), s: tape.leaf(Tensor3::zeros(shape)) }
    }

    /// One step on `x_k` of shape `B × input × 1`.
    pub fn step(&self, tape: &mut GradTape, params: &Bound, x_k: Var, prev: LstmState) -> Result<LstmStep> {
        let xs = tape.shape(x_k);
        if xs.channels != self.input_size || xs.time != 1 {
            return Err(TensorError::Invalid {
                op: "lstm_cell_step",
                msg: format!("expected B×{}×1 input, got {xs}", self.input_size),
            });
        }
        let pg = self.candidate.preactivation(tape, params, x_k, prev.h)?;
        let pi = self.input_gate.preactivation(tape, params, x_k, prev.h)?;
        let pf = self.forget_gate.preactivation(tape, params, x_k, prev.h)?;
        let po = self.output_gate.preactivation(tape, params, x_k, prev.h)?;
        let g = tape.tanh(pg);
        let i = tape.sigmoid(pi);
        let f = tape.sigmoid(pf);
        let o = tape.sigmoid(po);
        let gi = tape.mul(g, i)?;
        let sf = tape.mul(prev.s, f)?;
        let s = tape.add(gi, sf)?;
        let ts = tape.tanh(s);
        let h = tape.mul(ts, o)?;
        Ok(LstmStep { state: LstmState { h, s }, g, i, f, o })
    }

    /// Runs the cell along time; outputs stay aligned with input time indices.
    pub fn run(&self, tape: &mut GradTape, params: &Bound, x: Var, reverse: bool) -> Result<Var> {
        let xs = tape.shape(x);
        let mut state = self.zero_state(tape, xs.batch);
        let mut outputs = vec![state.h; xs.time];
        let order: Vec<usize> = if reverse { (0..xs.time).rev().collect() } else { (0..xs.time).collect() };
        for t in order {
            let x_t = tape.time_step(x, t)?;
            state = self.step(tape, params, x_t, state)?.state;
            outputs[t] = state.h;
        }
        tape.stack_time(&outputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub forward: LstmCell,
    pub backward: Option<LstmCell>,
}

impl LstmLayer {
    pub fn output_size(&self) -> usize {
        self.forward.hidden_size * if self.backward.is_some() { 2 } else { 1 }
    }

    pub fn run(&self, tape: &mut GradTape, params: &Bound, x: Var) -> Result<Var> {
        let fwd = self.forward.run(tape, params, x, false)?;
        match &self.backward {
            None => Ok(fwd),
            Some(cell) => {
                let bwd = cell.run(tape, params, x, true)?;
                tape.concat_channels(&[fwd, bwd])
            }
        }
    }
}

/// Stacked, optionally bidirectional LSTM over `B × C × T` sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        layers: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut out = Vec::with_capacity(layers);
        let mut width = input_size;
        for l in 0..layers {
            let forward = LstmCell::new(store, &format!("{name}.{l}.fwd"), width, hidden_size, rng);
            let backward =
                bidirectional.then(|| LstmCell::new(store, &format!("{name}.{l}.bwd"), width, hidden_size, rng));
            let layer = LstmLayer { forward, backward };
            width = layer.output_size();
            out.push(layer);
        }
        LstmStack { layers: out }
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, LstmLayer::output_size)
    }

    pub fn forward(&self, tape: &mut GradTape, params: &Bound, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.run(tape, params, h))
    }
}
