use serde::{Deserialize, Serialize};

use super::tensor::Real;
use crate::params::ParamTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            weight_decay: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with coupled (L2) weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Parameters this optimizer may touch; `None` means all.
    trainable: Option<Vec<bool>>,
    t: u32,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &[ParamTensor<T>]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![T::zero(); p.values.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.values.len()]).collect(),
            trainable: None,
            t: 0,
        }
    }

    /// Restricts updates to the parameters at `indices`.
    pub fn only(mut self, indices: &[usize]) -> Self {
        let mut mask = vec![false; self.m.len()];
        for &i in indices {
            mask[i] = true;
        }
        self.trainable = Some(mask);
        self
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [ParamTensor<T>], grads: &[Vec<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, wd) = (T::one(), T::from_f64(c.weight_decay));
        let step = T::from_f64(c.learning_rate / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if self.trainable.as_ref().is_some_and(|mask| !mask[i]) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let gj = g[j] + wd * p.values[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                p.values[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}
