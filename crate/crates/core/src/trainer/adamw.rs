//! AdamW with decoupled weight decay and bias-corrected moments.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a flat parameter slice. `t` is the 1-based step.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::dim("adamw_step", &[param.len()], &[grad.len()]));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * cfg.weight_decay * param[i];
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer state for a whole parameter store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every listed parameter that is currently trainable; frozen
    /// parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        for (id, g) in grads {
            let i = id.index();
            if !store.entry(*id).trainable {
                continue;
            }
            let p = store.value_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw_step", p.shape(), g.shape()));
            }
            adamw_update(
                p.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step,
                lr,
                &self.config,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(p0: f64, g: f64, lr: f64, cfg: &AdamWConfig) -> f64 {
        let mut p = [p0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[g], &mut m, &mut v, 1, lr, cfg).unwrap();
        p[0]
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(one_step(0.37, 0.0, 1e-2, &cfg), 0.37);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.1 g, v = 0.05 g², m̂ = g, v̂ = g²; update = lr g/(|g|+eps).
        let cfg = AdamWConfig::default();
        let (p0, g, lr) = (0.5, 0.2, 1e-3);
        let expected = p0 - lr * 0.01 * p0 - lr * 0.2 / (0.2 + 1e-8);
        let got = one_step(p0, g, lr, &cfg);
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd_p() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let (p0, lr) = (2.0, 0.05);
        assert_eq!(one_step(p0, 0.0, lr, &cfg), p0 - lr * 0.1 * p0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = [0.0; 2];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let cfg = AdamWConfig::default();
        assert!(adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &cfg).is_err());
    }
}
