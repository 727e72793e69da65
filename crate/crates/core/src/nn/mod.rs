//! Differentiable layers: convolution, dense, pooling, dropout and the LSTM baseline.

mod layers;
mod lstm;
mod params;

pub use layers::{Conv1d, Dense};
pub use lstm::{GateWeights, LstmCell, LstmLayer, LstmStack, LstmState, LstmStep};
pub use params::{Bound, ParamId, ParamStore};

use rand::Rng;

use crate::tape::{GradTape, Var};
use crate::tensor::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mean over time: `B × C × T` to `B × C × 1`.
pub fn global_avg_pool(tape: &mut GradTape, x: Var) -> Var {
    tape.global_avg_pool(x)
}

/// Inverted dropout. Eval mode and `p == 0` return `x` untouched.
pub fn dropout(tape: &mut GradTape, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidProbability(p));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..tape.shape(x).len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mask(x, mask)
}
