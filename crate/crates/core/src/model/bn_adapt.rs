//! Target-domain batch-norm adaptation: re-estimate the running statistics
//! on target batches, optionally followed by entropy-minimising updates of
//! the BN scale and shift parameters only.

use serde::{Deserialize, Serialize};

use super::net::{logits_to_probmaps, stacked_grad_to_tensor, BnMode, SegModel};
use super::optim::{Adam, AdamConfig};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::losses::{self_entropy_grad, softmax_backward, ProbMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnAdaptConfig {
    /// Weight of the new batch moments in the running average, in `(0, 1]`.
    pub momentum: f64,
    /// Sweeps over the target batches.
    pub passes: usize,
    pub train_gamma_beta: bool,
    pub entropy_steps: usize,
    pub learning_rate: f64,
}

impl Default for BnAdaptConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            passes: 1,
            train_gamma_beta: false,
            entropy_steps: 0,
            learning_rate: 3e-5,
        }
    }
}

impl BnAdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config(format!("momentum must be in (0, 1], got {}", self.momentum)));
        }
        if self.passes == 0 {
            return Err(Error::Config("passes must be positive".into()));
        }
        Ok(())
    }
}

/// Returns an adapted copy of `model`. Convolution weights and biases are
/// never modified; BN scale/shift only change when `train_gamma_beta` is set.
pub fn adapt_bn_statistics<T: Real>(
    model: &SegModel<T>,
    target_batches: &[Tensor<T>],
    cfg: &BnAdaptConfig,
) -> Result<SegModel<T>> {
    cfg.validate()?;
    if target_batches.is_empty() {
        return Err(Error::Argument("BN adaptation needs at least one target batch".into()));
    }
    let mut adapted = model.clone();
    for _ in 0..cfg.passes {
        for batch in target_batches {
            let (_, cache) = adapted.forward_with_cache(batch, BnMode::Batch)?;
            adapted.update_running_stats(&cache, cfg.momentum);
        }
    }
    if cfg.train_gamma_beta && cfg.entropy_steps > 0 {
        let affine = adapted.bn_affine_indices();
        let adam_cfg = AdamConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(adam_cfg, adapted.params()).only(&affine);
        for step in 0..cfg.entropy_steps {
            let batch = &target_batches[step % target_batches.len()];
            let (logits, cache) = adapted.forward_with_cache(batch, BnMode::Running)?;
            let probs = ProbMap::stack(&logits_to_probmaps(&logits)?)?;
            let (h, grad_p) = self_entropy_grad(&probs);
            if !h.is_finite() {
                return Err(Error::Numerical(format!("non-finite entropy at BN step {step}")));
            }
            let dlogits = stacked_grad_to_tensor(&softmax_backward(&probs, &grad_p), batch.n);
            let grads = adapted.backward(&cache, dlogits);
            opt.step(adapted.params_mut(), &grads);
        }
    }
    Ok(adapted)
}
