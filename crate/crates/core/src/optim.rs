//! Adam with decoupled weight decay and the warmup / inverse-square-root
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Applied directly to the parameters, scaled by the learning rate.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one pair per parameter, plus the
/// number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// Applies one bias-corrected Adam update. Each parameter is replaced by a
/// fresh trainable leaf holding the new values. Parameters with no entry in
/// `grads` are treated as having a zero gradient.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &Gradients,
    state: &mut AdamState,
    lr: f32,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} parameters but state for {}",
            params.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let correction2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        let n = param.numel();
        let (m, v) = (&mut state.first_moment[i], &mut state.second_moment[i]);
        if m.len() != n || v.len() != n {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
        let grad = grads.get(param);
        if let Some(g) = grad {
            if g.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        let mut values = param.to_vec();
        for j in 0..n {
            let g = grad.map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] as f64 / correction1;
            let v_hat = v[j] as f64 / correction2;
            let mut p = values[j] as f64;
            p -= (lr * cfg.weight_decay) as f64 * p;
            p -= lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64);
            values[j] = p as f32;
        }
        *param = Tensor::param(param.shape().to_vec(), values)?;
    }
    Ok(())
}

/// `base_lr · min(step / warmup, sqrt(warmup / step))`.
pub fn lr_at_step(step: u64, base_lr: f32, warmup_steps: u64) -> Result<f32> {
    if step == 0 {
        return Err(Error::InvalidArgument(
            "learning-rate schedule starts at step 1".into(),
        ));
    }
    if warmup_steps == 0 {
        return Err(Error::InvalidArgument(
            "warmup_steps must be positive".into(),
        ));
    }
    let (s, w) = (step as f64, warmup_steps as f64);
    Ok((base_lr as f64 * (s / w).min((w / s).sqrt())) as f32)
}
