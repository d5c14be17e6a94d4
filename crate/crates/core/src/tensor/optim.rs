use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("parameter `{name}`: {what} length {got} != {expected}")]
    Length {
        name: String,
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

/// AdamW hyper-parameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moments. `step` counts the updates this parameter has
/// actually received, so a parameter skipped on some iterations keeps its
/// own bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

impl AdamW {
    pub fn step(
        &self,
        name: &str,
        param: &mut [f32],
        grad: &[f32],
        state: &mut AdamState,
        lr: f32,
    ) -> Result<(), OptimError> {
        let n = param.len();
        for (what, got) in [("grad", grad.len()), ("m", state.m.len()), ("v", state.v.len())] {
            if got != n {
                return Err(OptimError::Length {
                    name: name.to_string(),
                    what,
                    got,
                    expected: n,
                });
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteGrad(name.to_string()));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = lr * self.weight_decay;
        for i in 0..n {
            let g = grad[i];
            let p = param[i] - decay * param[i];
            let m = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            state.m[i] = m;
            state.v[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            param[i] = p - lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
