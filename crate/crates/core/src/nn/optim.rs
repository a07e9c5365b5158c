//! AdamW: Adam moments with weight decay applied directly to the weights
//! rather than folded into the gradient.

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.epsilon > 0.0;
        if !ok {
            return Err(NnError::InvalidOptimizer(format!("{self:?}")));
        }
        Ok(())
    }
}

/// One bias-corrected AdamW step over every parameter. Consumes the
/// gradients: they are zeroed afterwards and a second call without a new
/// backward pass fails.
pub fn adamw_update(store: &mut ParamStore, cfg: &OptimizerConfig) -> Result<(), NnError> {
    cfg.validate()?;
    store.ensure_gradients()?;
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.learning_rate;
    for p in &mut store.params {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            let w = p.value[i];
            p.value[i] = w - lr * cfg.weight_decay * w - lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    store.mark_consumed();
    Ok(())
}
