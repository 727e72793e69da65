use crate::tensor::{Tensor3, TensorError};

use super::TrainError;

/// Bias-corrected Adam with one pair of moment tensors per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor3>,
    v: Vec<Tensor3>,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &[Tensor3]) -> Self {
        let zeros: Vec<Tensor3> = params.iter().map(|p| Tensor3::zeros(p.shape())).collect();
        AdamState { beta1: Self::BETA1, beta2: Self::BETA2, eps: Self::EPS, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Rebuilds a state from saved moments; shapes are checked on the next step.
    pub fn from_parts(step: u64, m: Vec<Tensor3>, v: Vec<Tensor3>) -> Self {
        AdamState { beta1: Self::BETA1, beta2: Self::BETA2, eps: Self::EPS, step, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor3] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor3] {
        &self.v
    }

    /// One update. Nothing is modified when any gradient is non-finite or
    /// any shape disagrees.
    pub fn step(&mut self, params: &mut [Tensor3], grads: &[Tensor3], lr: f64) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TensorError::Invalid {
                op: "adam",
                msg: format!("{} parameters, {} gradients, {} moment slots", params.len(), grads.len(), self.m.len()),
            }
            .into());
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch { op: "adam", left: p.shape(), right: g.shape() }.into());
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient { param: i, index: pos });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
