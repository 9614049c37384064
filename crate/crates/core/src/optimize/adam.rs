use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 1e-6;

/// Moment buffers and hyperparameters for one parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            weight_decay: WEIGHT_DECAY,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    fn check(&self, params: &[f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer block has {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient("optimizer input"));
        }
        Ok(())
    }

    fn update_moments(&mut self, grads: &[f64]) -> (f64, f64) {
        self.step += 1;
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        }
        let t = self.step as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.check(params, grads)?;
    let (c1, c2) = state.update_moments(grads);
    for ((p, m), v) in params.iter_mut().zip(&state.m).zip(&state.v) {
        let m_hat = m / c1;
        let v_hat = v / c2;
        *p -= state.lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * *p);
    }
    Ok(())
}

/// Adam whose denominator is shared across the block: the largest
/// bias-corrected second moment. Relative gradient magnitudes between
/// coordinates survive the normalization.
pub fn adam_uniform_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.check(params, grads)?;
    let (c1, c2) = state.update_moments(grads);
    let v_max = state.v.iter().fold(0.0f64, |a, v| a.max(*v)) / c2;
    let denom = v_max.sqrt() + state.eps;
    for (p, m) in params.iter_mut().zip(&state.m) {
        *p -= state.lr * (m / c1 / denom + state.weight_decay * *p);
    }
    Ok(())
}
