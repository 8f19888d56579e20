//! RMSProp over a fixed list of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Step size for student adaptation, which starts from trained weights.
    pub adapt_lr: f64,
    /// Smoothing constant of the squared-gradient average.
    pub alpha: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-5,
            adapt_lr: 1e-5,
            alpha: 0.99,
            eps: 1e-8,
            momentum: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.adapt_lr > 0.0) || !self.adapt_lr.is_finite() {
            return Err(Error::InvalidConfig(format!("adaptation learning rate must be > 0, got {}", self.adapt_lr)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// The same settings with `lr` replaced by `adapt_lr`.
    pub fn for_adaptation(&self) -> Self {
        OptimConfig { lr: self.adapt_lr, ..*self }
    }
}

/// `v ← αv + (1−α)g²`, `p ← p − lr·g/(√v + ε)` (with an optional momentum buffer).
#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    cfg: OptimConfig,
    square_avg: Vec<Vec<T>>,
    momentum: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(cfg: OptimConfig, sizes: &[usize]) -> Self {
        let zeros = |n: &usize| vec![T::zero(); *n];
        RmsProp {
            cfg,
            square_avg: sizes.iter().map(zeros).collect(),
            momentum: if cfg.momentum > 0.0 { sizes.iter().map(zeros).collect() } else { Vec::new() },
        }
    }

    /// Updates tensor `slot` in place.
    pub fn step(&mut self, slot: usize, param: &mut [T], grad: &[T]) {
        let (lr, alpha, eps, mom) = (T::lit(self.cfg.lr), T::lit(self.cfg.alpha), T::lit(self.cfg.eps), T::lit(self.cfg.momentum));
        let v = &mut self.square_avg[slot];
        assert_eq!(v.len(), param.len());
        assert_eq!(grad.len(), param.len());
        for i in 0..param.len() {
            let g = grad[i];
            v[i] = alpha * v[i] + (T::one() - alpha) * g * g;
            let step = g / (v[i].sqrt() + eps);
            if self.momentum.is_empty() {
                param[i] -= lr * step;
            } else {
                let b = &mut self.momentum[slot][i];
                *b = mom * *b + step;
                param[i] -= lr * *b;
            }
        }
    }
}
