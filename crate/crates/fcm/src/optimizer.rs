//! Adafactor with the pre-training schedules (warmhold-then-rsqrt learning
//! rate, beta2 = 1 - k^-0.8, global-norm clipping, lr^2 decoupled weight
//! decay) plus classical SGD momentum as the finetuning alternative.
//!
//! Beyond lr, beta1, beta2, weight decay and clipping, the update follows the
//! original Adafactor defaults: factored second moments for rank >= 2 tensors,
//! eps1 = 1e-30 inside the root, eps2 = 1e-3 as the relative-step floor, and
//! update-RMS clipping at 1.0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ADAFACTOR_BETA1: f32 = 0.9;
pub const ADAFACTOR_EPS1: f32 = 1e-30;
pub const ADAFACTOR_EPS2: f32 = 1e-3;
pub const ADAFACTOR_CLIP_D: f32 = 1.0;
pub const GRAD_CLIP_NORM: f32 = 1.0;

#[derive(Debug, Error)]
pub enum OptError {
    #[error("step number must be >= 1, got {0}")]
    BadStep(u64),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(usize),
    #[error("optimizer state has {state} slots but {got} tensors were given")]
    SlotCount { state: usize, got: usize },
    #[error("tensor {index}: state/param shape mismatch ({state} vs {param} elements)")]
    ShapeMismatch { index: usize, state: usize, param: usize },
}

/// lr = 0.01 for the first 10,000 steps, then k^-1/2 (continuous at the join).
/// Schedules are scalar controls and stay in f64; only tensor data is f32.
pub fn lr_schedule(step: u64) -> Result<f64, OptError> {
    if step == 0 {
        return Err(OptError::BadStep(step));
    }
    if step <= 10_000 {
        Ok(0.01)
    } else {
        Ok((step as f64).powf(-0.5))
    }
}

/// beta2 = 1 - k^-0.8, rising from 0 toward 1.
pub fn beta2_schedule(step: u64) -> Result<f64, OptError> {
    if step == 0 {
        return Err(OptError::BadStep(step));
    }
    Ok(1.0 - (step as f64).powf(-0.8))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSetting {
    /// The pre-training schedule of [`lr_schedule`].
    RsqrtDecay,
    Constant(f32),
}

impl LrSetting {
    pub fn lr_at(&self, step: u64) -> Result<f64, OptError> {
        match self {
            LrSetting::RsqrtDecay => lr_schedule(step),
            LrSetting::Constant(v) => {
                if step == 0 {
                    Err(OptError::BadStep(step))
                } else {
                    Ok(*v as f64)
                }
            }
        }
    }
}

/// Scale all gradients jointly so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> Result<f32, OptError> {
    let mut sumsq = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        for &v in g {
            if !v.is_finite() {
                return Err(OptError::NonFiniteGradient(i));
            }
            sumsq += (v as f64) * (v as f64);
        }
    }
    let norm = sumsq.sqrt() as f32;
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// Second-moment estimate: rank >= 2 tensors factor into row/column
/// accumulators, vectors keep the full accumulator.
#[derive(Debug, Clone, PartialEq)]
pub enum SecondMoment {
    Factored { row: Vec<f32>, col: Vec<f32> },
    Full { v: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub momentum: Vec<f32>,
    pub second: SecondMoment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub slots: Vec<ParamSlot>,
}

impl OptState {
    pub fn init(shapes: &[Vec<usize>]) -> Self {
        let slots = shapes
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let second = if shape.len() >= 2 {
                    let rows: usize = shape[..shape.len() - 1].iter().product();
                    let cols = shape[shape.len() - 1];
                    SecondMoment::Factored { row: vec![0.0; rows], col: vec![0.0; cols] }
                } else {
                    SecondMoment::Full { v: vec![0.0; n] }
                };
                ParamSlot { momentum: vec![0.0; n], second }
            })
            .collect();
        OptState { step: 0, slots }
    }
}

fn rms(v: &[f32]) -> f32 {
    (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / v.len() as f64).sqrt() as f32
}

fn check_alignment(
    state: &OptState,
    tensors: &[&mut Vec<f32>],
    grads: &[Vec<f32>],
) -> Result<(), OptError> {
    if state.slots.len() != tensors.len() || grads.len() != tensors.len() {
        return Err(OptError::SlotCount { state: state.slots.len(), got: tensors.len() });
    }
    for (i, (slot, t)) in state.slots.iter().zip(tensors).enumerate() {
        if slot.momentum.len() != t.len() || grads[i].len() != t.len() {
            return Err(OptError::ShapeMismatch { index: i, state: slot.momentum.len(), param: t.len() });
        }
    }
    Ok(())
}

/// One Adafactor step over clipped gradients. Increments the step counter
/// first, then applies lr(k), beta2(k), the relative step size
/// lr(k) * max(eps2, RMS(param)), update-RMS clipping, beta1 momentum of the
/// scaled update, and decoupled lr(k)^2 weight decay.
pub fn adafactor_update(
    state: &mut OptState,
    tensors: &mut [&mut Vec<f32>],
    shapes: &[Vec<usize>],
    grads: &[Vec<f32>],
    lr_setting: &LrSetting,
) -> Result<(), OptError> {
    check_alignment(state, tensors, grads)?;
    state.step += 1;
    let k = state.step;
    let lr = lr_setting.lr_at(k)? as f32;
    let beta2 = beta2_schedule(k)? as f32;
    let decay = lr * lr;

    for (i, (param, grad)) in tensors.iter_mut().zip(grads).enumerate() {
        let slot = &mut state.slots[i];
        let alpha = lr * ADAFACTOR_EPS2.max(rms(param));

        // Normalized update u = g / sqrt(v_hat).
        let mut update: Vec<f32> = match &mut slot.second {
            SecondMoment::Factored { row, col } => {
                let rows = row.len();
                let cols = col.len();
                debug_assert_eq!(rows * cols, grad.len(), "factored slot matches {:?}", shapes[i]);
                for (r, chunk) in row.iter_mut().zip(grad.chunks_exact(cols)) {
                    let s: f32 = chunk.iter().map(|&g| g * g + ADAFACTOR_EPS1).sum();
                    *r = beta2 * *r + (1.0 - beta2) * s;
                }
                for (j, c) in col.iter_mut().enumerate() {
                    let s: f32 = (0..rows).map(|r| {
                        let g = grad[r * cols + j];
                        g * g + ADAFACTOR_EPS1
                    }).sum();
                    *c = beta2 * *c + (1.0 - beta2) * s;
                }
                let row_sum: f32 = row.iter().sum();
                grad.iter()
                    .enumerate()
                    .map(|(idx, &g)| {
                        let vhat = row[idx / cols] * col[idx % cols] / row_sum;
                        g / vhat.sqrt()
                    })
                    .collect()
            }
            SecondMoment::Full { v } => {
                for (vv, &g) in v.iter_mut().zip(grad) {
                    *vv = beta2 * *vv + (1.0 - beta2) * (g * g + ADAFACTOR_EPS1);
                }
                grad.iter().zip(v.iter()).map(|(&g, &vv)| g / vv.sqrt()).collect()
            }
        };

        // Clip the update RMS to d, then scale by the relative step size.
        let u_rms = rms(&update);
        let clip = 1.0f32.max(u_rms / ADAFACTOR_CLIP_D);
        for u in update.iter_mut() {
            *u = alpha * (*u / clip);
        }

        for ((p, m), u) in param.iter_mut().zip(slot.momentum.iter_mut()).zip(update) {
            *m = ADAFACTOR_BETA1 * *m + (1.0 - ADAFACTOR_BETA1) * u;
            *p = *p - *m - decay * *p;
        }
    }
    Ok(())
}

/// Classical momentum: m <- momentum * m + g; param <- param - lr * m.
pub fn sgd_momentum_update(
    state: &mut OptState,
    tensors: &mut [&mut Vec<f32>],
    grads: &[Vec<f32>],
    lr: f32,
    momentum: f32,
) -> Result<(), OptError> {
    check_alignment(state, tensors, grads)?;
    state.step += 1;
    for (i, (param, grad)) in tensors.iter_mut().zip(grads).enumerate() {
        let m = &mut state.slots[i].momentum;
        for ((p, mv), &g) in param.iter_mut().zip(m.iter_mut()).zip(grad) {
            *mv = momentum * *mv + g;
            *p -= lr * *mv;
        }
    }
    Ok(())
}
