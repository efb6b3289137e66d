//! AdamW: Adam with bias-corrected moments and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip applied before each step.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.001,
            eps: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            batch_size: 32,
            clip_norm: 5.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("optim.learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optim.beta1 and optim.beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("optim.eps must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("optim.weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("optim.batch_size must be >= 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("optim.clip_norm must be > 0");
        }
        Ok(())
    }
}

/// One AdamW update of every parameter from its accumulated gradient.
/// Increments the step counter and zeroes the gradients.
pub fn adamw_step(store: &mut ParameterStore, cfg: &OptimConfig) {
    let t = store.bump_step() as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (value, grad, m, v) = store.adam_parts(id);
        let iter = value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, &g), (m, v)) in iter {
            *p -= cfg.learning_rate * cfg.weight_decay * *p;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store_with(value: f64, grad: f64) -> (ParameterStore, crate::nn::ParamId) {
        let mut s = ParameterStore::new(0);
        let id = s.insert("p", Tensor::vector(vec![value])).unwrap();
        s.accumulate(&[(id, Tensor::vector(vec![grad]))], 1.0);
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut s, id) = store_with(0.37, 0.0);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &cfg);
        assert_eq!(s.value(id).data(), &[0.37]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = store_with(0.0, 1.0);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &cfg);
        let want = -0.001 / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] - want).abs() < 1e-18);
        assert_eq!(s.grad(id).data(), &[0.0]);
    }

    #[test]
    fn decay_only_branch() {
        let (mut s, id) = store_with(1.0, 0.0);
        adamw_step(&mut s, &OptimConfig::default());
        assert!((s.value(id).data()[0] - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut s = ParameterStore::new(0);
        let grads = [3.0, -0.2, 1e-4, -50.0];
        let id = s.insert("p", Tensor::vector(vec![0.5; 4])).unwrap();
        s.accumulate(&[(id, Tensor::vector(grads.to_vec()))], 1.0);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &cfg);
        for (p, g) in s.value(id).data().iter().zip(grads) {
            assert_eq!((p - 0.5).signum(), -g.signum());
        }
    }

    #[test]
    fn validate_rejects_bad_values() {
        assert!(OptimConfig::default().validate().is_ok());
        for cfg in [
            OptimConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            OptimConfig {
                beta1: 1.0,
                ..Default::default()
            },
            OptimConfig {
                eps: 0.0,
                ..Default::default()
            },
            OptimConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
