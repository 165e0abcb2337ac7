use std::f64::consts::PI;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{Gm3dParams, Layout};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments, one tensor per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &Gm3dParams<f32>) -> Self {
        let z: Vec<Tensor<f32>> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step. `grads[i] == None` means a zero
/// gradient. Decay applies only to parameters whose `ParamSpec` decays.
pub fn adamw_step(
    params: &mut Gm3dParams<f32>,
    layout: &Layout,
    state: &mut AdamState,
    grads: &[Option<Vec<f32>>],
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(Error::InvariantViolation(format!(
            "optimizer received {} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.tensors.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (ob1, ob2) = ((1.0 - cfg.beta1) as f32, (1.0 - cfg.beta2) as f32);
    let step = (lr / bc1) as f32;
    let sqrt_bc2 = bc2.sqrt() as f32;
    let eps = cfg.eps as f32;
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let decay = if layout.specs[i].decays() {
            (1.0 - lr * cfg.weight_decay) as f32
        } else {
            1.0
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + ob1 * g;
            v[j] = b2 * v[j] + ob2 * g * g;
            let denom = v[j].sqrt() / sqrt_bc2 + eps;
            pd[j] = pd[j] * decay - step * m[j] / denom;
        }
    }
    Ok(())
}

/// `base * 0.5 * (1 + cos(pi * progress / total))`; constant when `cosine` is off.
pub fn cosine_lr(base: f64, progress: f64, total: f64, cosine: bool) -> f64 {
    if !cosine {
        return base;
    }
    let x = (progress / total).clamp(0.0, 1.0);
    base * 0.5 * (1.0 + (PI * x).cos())
}
