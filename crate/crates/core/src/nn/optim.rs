//! Adam / AdamW keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParameterSnapshot, Params, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay (0 ⇒ plain Adam).
    pub weight_decay: f32,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn adam() -> Self {
        Self::adamw(0.0)
    }

    pub fn adamw(weight_decay: f32) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter selected by `trainable`. Weight decay is
    /// applied only where `decays` says so.
    pub fn update<P: Params + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &ParameterSnapshot,
        lr: f32,
        trainable: &dyn Fn(&str) -> bool,
        decays: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let m_all = &mut self.m;
        let v_all = &mut self.v;
        params.visit_mut("", &mut |name, shape, data| {
            if !trainable(name) {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let m = m_all
                .entry(name.to_string())
                .or_insert_with(|| Tensor::new(shape.to_vec(), vec![0.0; data.len()]));
            let v = v_all
                .entry(name.to_string())
                .or_insert_with(|| Tensor::new(shape.to_vec(), vec![0.0; data.len()]));
            let decay = wd > 0.0 && decays(name);
            for i in 0..data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                if decay {
                    data[i] -= lr * wd * data[i];
                }
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

/// Scales `grads` in place so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParameterSnapshot, max_norm: f32) -> f32 {
    let total: f64 = grads
        .0
        .values()
        .flat_map(|t| t.data.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / (norm + 1e-6);
        for t in grads.0.values_mut() {
            t.data.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
