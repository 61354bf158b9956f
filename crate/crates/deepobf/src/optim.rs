//! Momentum SGD. Updates are deterministic given identical inputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidArg(
                "momentum and weight decay must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One momentum SGD update on a single parameter array:
/// `g' = g + wd*p; v = mu*v + g'; p -= lr*v`.
pub fn sgd_step(
    param: &mut [f32],
    grad: &[f32],
    velocity: &mut [f32],
    cfg: &SgdConfig,
) -> Result<()> {
    cfg.validate()?;
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd extents disagree: param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for i in 0..param.len() {
        let g = grad[i] + cfg.weight_decay * param[i];
        velocity[i] = cfg.momentum * velocity[i] + g;
        param[i] -= cfg.lr * velocity[i];
    }
    Ok(())
}

/// Optimizer state holder: one velocity buffer per parameter array, keyed by
/// a stable string id so training order does not affect results.
#[derive(Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Apply one update to `param` using its accumulated gradient. Parameters
    /// without a gradient are left untouched.
    pub fn update(&mut self, key: &str, param: &mut Tensor) -> Result<()> {
        let Some(grad) = param.grad().map(<[f32]>::to_vec) else {
            return Ok(());
        };
        let vel = self
            .velocity
            .entry(key.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        sgd_step(param.data_mut(), &grad, vel, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAIN: SgdConfig = SgdConfig {
        lr: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
    };

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, &PLAIN).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.5], &mut v, &PLAIN).unwrap();
        assert_eq!(p, vec![0.95]);
    }

    #[test]
    fn momentum_velocity_recursion() {
        // Two steps with mu=0.9, lr=0.1, g=1 each time:
        //   v1 = 1,   p1 = 1 - 0.1*1   = 0.9
        //   v2 = 1.9, p2 = 0.9 - 0.19  = 0.71
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, &cfg).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        sgd_step(&mut p, &[1.0], &mut v, &cfg).unwrap();
        assert!((p[0] - 0.71).abs() < 1e-6);
        assert!((v[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let cfg = SgdConfig {
            lr: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        assert!(sgd_step(&mut p, &[1.0], &mut v, &cfg).is_err());
    }
}
