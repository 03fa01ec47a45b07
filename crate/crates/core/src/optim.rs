//! AdamW: Adam moments with bias correction and decoupled weight decay
//! (decay is applied directly to the weights before the moment update, never
//! through the gradients).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment estimates, allocated lazily per trainable parameter.
/// Frozen parameters never appear here.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    pub step_count: u64,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_state_for(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }
}

impl AdamW {
    /// One update over the trainable parameters. `grads` must hold one entry
    /// per trainable parameter, keyed by id, averaged over the batch.
    pub fn step(
        &self,
        store: &mut ParamStore,
        grads: &HashMap<ParamId, Vec<f64>>,
        state: &mut OptimState,
        lr_override: Option<f64>,
    ) -> Result<()> {
        let lr = lr_override.unwrap_or(self.lr);
        state.step_count += 1;
        let t = state.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.trainable_ids() {
            let g = grads
                .get(&id)
                .ok_or_else(|| Error::MissingGrad(store.name(id).to_string()))?;
            let n = store.value(id).numel();
            debug_assert_eq!(g.len(), n);
            let (m, v) = state
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let w = store.value_mut(id).data_mut();
            for i in 0..n {
                // decoupled decay first: w ← w − lr·wd·w
                w[i] -= lr * self.weight_decay * w[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
