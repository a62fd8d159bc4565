use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> AdamMoments<S> {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
        }
    }
}

/// Bias-corrected Adam update of `params` in place. `step` counts from 1.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    state: &mut AdamMoments<S>,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "adam step".into(),
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if step == 0 {
        return Err(Error::invalid("adam step count starts at 1"));
    }
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let one = S::one();
    let t = step.min(i32::MAX as u64) as i32;
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = S::of(cfg.lr);
    let eps = S::of(cfg.eps);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
