//! Adam with decoupled weight decay and a warmup + linear-decay learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One optimizer step. Parameters are first shrunk by `1 - lr·weight_decay`,
/// then moved by the bias-corrected Adam direction. Non-finite gradients
/// reject the step and leave parameters and state untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    Error::check_dim(params.len(), grads.len())?;
    Error::check_dim(params.len(), state.m.len())?;
    Error::check_dim(params.len(), state.v.len())?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - hyper.lr * hyper.weight_decay;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p * decay - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Linear warmup from 0 to `peak`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    peak: f64,
    warmup_steps: u64,
    total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(peak.is_finite() && peak > 0.0) {
            return Err(Error::invalid("peak learning rate must be positive"));
        }
        if warmup_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::invalid(format!(
                "need 0 < warmup ({warmup_steps}) < total ({total_steps})"
            )));
        }
        Ok(Self {
            peak,
            warmup_steps,
            total_steps,
        })
    }

    pub fn at(&self, step: u64) -> f64 {
        lr_at(step, self.peak, self.warmup_steps, self.total_steps)
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }
}

pub fn lr_at(step: u64, peak: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    if step >= total_steps {
        0.0
    } else if step <= warmup_steps {
        peak * step as f64 / warmup_steps as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
    }
}
