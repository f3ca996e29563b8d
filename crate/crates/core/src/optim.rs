//! Adam with decoupled weight decay, global-norm gradient clipping, and the
//! warmup/linear-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState<S: Scalar> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Weight decay is decoupled: it
/// shrinks parameters by `lr_t * weight_decay` independently of the
/// gradient-driven step.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    lr_t: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    state.t += 1;
    let b1 = s::<S>(state.beta1);
    let b2 = s::<S>(state.beta2);
    let eps = s::<S>(state.eps);
    let lr = s::<S>(lr_t);
    let one = S::one();
    let bc1 = s::<S>(1.0 - state.beta1.powi(state.t as i32));
    let bc2 = s::<S>(1.0 - state.beta2.powi(state.t as i32));
    for (i, p) in params.iter_mut().enumerate() {
        if p.numel() != grads[i].len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![grads[i].len()],
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if weight_decay != 0.0 {
            let wd = s::<S>(weight_decay);
            for x in data.iter_mut() {
                *x -= lr * wd * *x;
            }
        }
    }
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let vf = v.to_f64().unwrap_or(f64::INFINITY);
            sq += vf * vf;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = s::<S>(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::WarmupExceedsTotal {
            warmup: warmup_steps,
            total: total_steps,
        });
    }
    let step = step.min(total_steps);
    if warmup_steps > 0 && step <= warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    Ok(base_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
}
