use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{Schedule, StageHyper};
use crate::model::{ToyVLM, Trainable};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate at 0-based `step` of `total_steps`.
///
/// Warmup lasts `ceil(warmup_ratio · total_steps)` steps and ramps linearly up to
/// `base_lr`; the cosine schedule then decays to zero at the final step.
pub fn learning_rate(hyper: &StageHyper, step: usize, total_steps: usize) -> f64 {
    let base = hyper.learning_rate;
    let warmup = (hyper.warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match hyper.schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let span = total_steps.saturating_sub(warmup).max(1);
            let progress = (step - warmup) as f64 / span as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW with decoupled weight decay. Only parameters of trainable groups ever get state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamW {
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    /// Global L2 norm of the gradients held by trainable parameters.
    pub fn grad_norm(model: &ToyVLM, trainable: Trainable) -> f64 {
        model
            .params()
            .iter()
            .filter(|(g, _)| trainable.get(*g))
            .filter_map(|(_, p)| p.value.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update to the trainable groups of `model`. Gradients are scaled
    /// so their global norm is at most `clip` (when `clip > 0`). Returns the norm
    /// before clipping.
    pub fn step(&mut self, model: &mut ToyVLM, trainable: Trainable, lr: f64, weight_decay: f64, clip: f64) -> f64 {
        let norm = Self::grad_norm(model, trainable);
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powf(self.t as f64);
        let bc2 = 1.0 - ADAM_BETA2.powf(self.t as f64);
        for (group, p) in model.params_mut() {
            if !trainable.get(group) {
                continue;
            }
            let n = p.values().len();
            let state = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let grad: Vec<f64> = match p.value.grad() {
                Some(g) => g.iter().map(|g| g * scale).collect(),
                None => vec![0.0; n],
            };
            for (i, w) in p.value.values_mut().iter_mut().enumerate() {
                let g = grad[i];
                state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
                state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *w);
            }
        }
        norm
    }
}
