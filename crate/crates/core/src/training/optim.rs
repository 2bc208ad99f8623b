//! AdamW, learning-rate schedules and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::params::{ParamKind, ParamTree};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then linear decay to zero at the last step.
    LinearDecay,
    /// Linear warmup, then constant.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub decay_ln_gamma: bool,
}

impl AdamWHyper {
    /// Decoupled decay applies to weight matrices and embeddings, and to
    /// LayerNorm γ only when enabled.
    pub fn decays(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Weight | ParamKind::Embedding | ParamKind::GateWeight => true,
            ParamKind::LnGamma => self.decay_ln_gamma,
            ParamKind::Bias | ParamKind::LnBeta | ParamKind::GateBias => false,
        }
    }
}

/// First and second moments, aligned with the flattened parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams<Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.flatten().iter().map(|p| Tensor::zeros(p.leaf.shape().to_vec())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One AdamW update with bias correction. `grads` follow the flattened
/// parameter order.
pub fn adamw_step(
    params: &mut ModelParams<Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamWHyper,
) -> Result<()> {
    let mut leaves = params.flatten_mut();
    if grads.len() != leaves.len() || state.m.len() != leaves.len() {
        return Err(Error::Contract(format!(
            "optimizer got {} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            leaves.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = hyper.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in leaves.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.leaf.shape() || state.m[i].shape() != p.leaf.shape() {
            return Err(Error::Contract(format!("{}: gradient shape {:?} vs parameter {:?}", p.name, g.shape(), p.leaf.shape())));
        }
        let decay = if hyper.decays(p.kind) { lr * hyper.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, theta) in p.leaf.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            *theta -= decay * *theta;
            *theta -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Learning rate for `step ∈ [0, steps]`.
pub fn lr_at(step: usize, steps: usize, warmup: usize, max_lr: f64, schedule: Schedule) -> f64 {
    if step < warmup {
        return max_lr * step as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => max_lr,
        // Warmup spanning the whole run leaves nothing to decay over.
        Schedule::LinearDecay if steps <= warmup => max_lr,
        Schedule::LinearDecay => max_lr * (steps.saturating_sub(step)) as f64 / (steps - warmup) as f64,
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
    norm
}
