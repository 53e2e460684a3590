use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SourceConfig;
use super::{evaluate_dice, images_to_tensor};
use crate::data::{augment, Sample};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_pseudo_grad, softmax_backward, ProbMap, PseudoLabelMap};
use crate::model::{logits_to_probmaps, stacked_grad_to_tensor, Adam, BnMode, Checkpoint, SegModel};
use crate::params::ParameterSnapshot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug)]
pub struct SourceOutcome {
    /// Best-validation model.
    pub model: SegModel<f32>,
    /// Its parameters, the anchor for weight consolidation.
    pub snapshot: ParameterSnapshot<f32>,
    pub history: Vec<SourceEpoch>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
}

/// Supervised cross-entropy training on labeled source data, keeping the
/// checkpoint with the best source-validation Dice.
pub fn train_source(
    model: &SegModel<f32>,
    source_train: &[Sample],
    source_val: &[Sample],
    cfg: &SourceConfig,
) -> Result<SourceOutcome> {
    cfg.validate()?;
    if cfg.epochs > 0 && (source_train.is_empty() || source_val.is_empty()) {
        return Err(Error::Argument("source training needs non-empty train and val sets".into()));
    }
    let classes = model.classes();
    let mut model = model.clone();
    let mut opt = Adam::new(cfg.adam(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..source_train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    let seed = rng.random::<u64>();
                    if cfg.augment {
                        augment(&source_train[i], &cfg.augmentation, seed)
                    } else {
                        source_train[i].clone()
                    }
                })
                .collect();
            let x = images_to_tensor(&batch.iter().map(|s| &s.image).collect::<Vec<_>>());
            let (logits, cache) = model.forward_with_cache(&x, BnMode::Batch)?;
            let probs = ProbMap::stack(&logits_to_probmaps(&logits)?)?;
            let labels = PseudoLabelMap::stack(
                &batch
                    .iter()
                    .map(|s| PseudoLabelMap::from_mask(&s.mask, classes))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let (loss, grad_p) = cross_entropy_pseudo_grad(&probs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite source loss at epoch {epoch}, batch {b}"
                )));
            }
            let dlogits = stacked_grad_to_tensor(&softmax_backward(&probs, &grad_p), x.n);
            let grads = model.backward(&cache, dlogits);
            model.update_running_stats(&cache, cfg.bn_momentum);
            opt.step(model.params_mut(), &grads);
            loss_sum += loss;
            batches += 1;
        }
        let val_dice = evaluate_dice(&model, source_val)?;
        history.push(SourceEpoch {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_dice,
        });
        if best.as_ref().is_none_or(|(_, d, _)| val_dice > *d) {
            best = Some((epoch, val_dice, Checkpoint::from_model(&model)));
        }
    }

    let (best_epoch, best_val_dice, model) = match best {
        Some((e, d, ckpt)) => (e, Some(d), ckpt.to_model()?),
        None => (0, None, model),
    };
    Ok(SourceOutcome {
        snapshot: model.snapshot(),
        model,
        history,
        best_epoch,
        best_val_dice,
    })
}

/// `epoch,train_loss,val_dice` with fixed precision.
pub fn history_csv(history: &[SourceEpoch]) -> String {
    let mut out = String::from("epoch,train_loss,val_dice\n");
    for h in history {
        let _ = writeln!(out, "{},{:.8},{:.8}", h.epoch, h.train_loss, h.val_dice);
    }
    out
}
