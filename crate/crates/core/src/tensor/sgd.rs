//! Stochastic gradient descent with momentum and stepped learning-rate decay.

use crate::error::{Error, Result};

use super::params::{FreezeMask, ParamStore};

/// Optimizer state: one velocity buffer per parameter plus the decay
/// schedule. The update is `v ← μ·v − lr·g`, `p ← p + v`, and the learning
/// rate is multiplied by `decay_factor` after every `step_size`-th step.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub step_count: u64,
    pub step_size: u64,
    pub decay_factor: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(
        store: &ParamStore,
        learning_rate: f64,
        momentum: f64,
        step_size: u64,
        decay_factor: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid_argument("sgd: learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid_argument("sgd: momentum must lie in [0, 1)"));
        }
        if step_size == 0 {
            return Err(Error::invalid_argument("sgd: step size must be positive"));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::invalid_argument("sgd: decay factor must lie in (0, 1]"));
        }
        let velocity = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        Ok(SgdState {
            learning_rate,
            momentum,
            step_count: 0,
            step_size,
            decay_factor,
            velocity,
        })
    }

    /// Applies one update from the gradients accumulated in the store.
    /// Frozen parameters keep value and velocity untouched.
    pub fn step(&mut self, store: &mut ParamStore, mask: &FreezeMask) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::invalid_state(
                "sgd state does not match the parameter store",
            ));
        }
        for id in store.ids() {
            if mask.is_frozen(id) {
                continue;
            }
            let t = store.get_mut(id);
            let g = t
                .grad
                .as_ref()
                .ok_or_else(|| Error::invalid_state("parameter has no gradient buffer"))?
                .clone();
            let v = &mut self.velocity[id.0];
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] - self.learning_rate * g[i];
                t.data[i] += v[i];
            }
            t.ensure_finite("sgd update")?;
        }
        self.step_count += 1;
        if self.step_count % self.step_size == 0 {
            self.learning_rate *= self.decay_factor;
        }
        Ok(())
    }
}
