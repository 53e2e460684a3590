use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AdaptationConfig, Method, RefreshCadence};
use super::{evaluate_dice, images_to_tensor, mix_seed, EVAL_BATCH};
use crate::data::{augment, Sample, UnlabeledImage};
use crate::error::{Error, Result};
use crate::losses::{
    self_entropy, softmax_backward, total_adaptation_loss_grad, EntropyMode, LossBreakdown, LossConfig,
    ProbMap, PseudoLabelMap,
};
use crate::metrics::{stability_report, StabilityReport};
use crate::model::{
    adapt_bn_statistics, logits_to_probmaps, stacked_grad_to_tensor, Adam, BnMode, Checkpoint, SegModel,
    Tensor,
};
use crate::params::{check_structure, ParameterSnapshot};
use crate::pseudolabel::{dtpl_pseudo_label, ld_pseudo_label};

const BN_MOMENTUM: f64 = 0.1;

/// One line of `records.jsonl`. Timing lives in [`EpochTiming`] so that
/// records of identical runs compare byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of the loss components; the labeled count is a sum.
    pub train_loss_breakdown: LossBreakdown,
    pub target_val_dice: f64,
    /// Labeled share of target-train pixels, `None` for `os`.
    pub pseudo_label_fraction: Option<f64>,
    pub snapshot_path: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptationOutcome {
    pub model: SegModel<f32>,
    /// Models kept at `snapshot_epochs`.
    pub checkpoints: BTreeMap<usize, Checkpoint>,
    /// `None` when no epoch ran.
    pub report: Option<StabilityReport>,
    pub records: Vec<EpochRecord>,
    pub timings: Vec<EpochTiming>,
    /// The loss composition the records satisfy.
    pub loss_config: LossConfig,
    /// One line per optimisation batch naming the images it used.
    pub log: Vec<String>,
}

impl AdaptationOutcome {
    pub fn model_at(&self, epoch: usize) -> Result<SegModel<f32>> {
        self.checkpoints
            .get(&epoch)
            .ok_or_else(|| Error::Argument(format!("no checkpoint kept for epoch {epoch}")))?
            .to_model()
    }
}

pub fn self_train_adapt(
    model: &SegModel<f32>,
    theta_star: &ParameterSnapshot<f32>,
    target_train: &[UnlabeledImage],
    target_val: &[Sample],
    cfg: &AdaptationConfig,
) -> Result<AdaptationOutcome> {
    self_train_adapt_with(model, theta_star, target_train, target_val, cfg, &mut |_, _| Ok(()))
}

/// Like [`self_train_adapt`], calling `observer` after each epoch; the
/// observer may fill in `snapshot_path`.
///
/// Only unlabeled target images reach the optimiser; `target_val` labels
/// are used for the per-epoch Dice record alone.
pub fn self_train_adapt_with(
    model: &SegModel<f32>,
    theta_star: &ParameterSnapshot<f32>,
    target_train: &[UnlabeledImage],
    target_val: &[Sample],
    cfg: &AdaptationConfig,
    observer: &mut dyn FnMut(&mut EpochRecord, &SegModel<f32>) -> Result<()>,
) -> Result<AdaptationOutcome> {
    cfg.validate()?;
    check_structure(model.params(), theta_star.entries())?;
    if cfg.epochs > 0 && (target_train.is_empty() || target_val.is_empty()) {
        return Err(Error::Argument("adaptation needs target-train images and a target-val set".into()));
    }
    let loss_cfg = match cfg.method {
        Method::Os if cfg.bn_adapt.train_gamma_beta && cfg.bn_adapt.entropy_steps > 0 => LossConfig {
            entropy_mode: EntropyMode::Min,
            ..cfg.loss_config()
        },
        Method::Os => LossConfig {
            entropy_mode: EntropyMode::None,
            ..cfg.loss_config()
        },
        _ => cfg.loss_config(),
    };
    let mut state = Loop {
        cfg,
        model: model.clone(),
        theta_star,
        target_train,
        opt: Adam::new(cfg.adam(), model.params()),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        log: Vec::new(),
        loss_cfg,
    };
    let mut out = AdaptationOutcome {
        model: model.clone(),
        checkpoints: BTreeMap::new(),
        report: None,
        records: Vec::with_capacity(cfg.epochs),
        timings: Vec::with_capacity(cfg.epochs),
        loss_config: loss_cfg,
        log: Vec::new(),
    };
    let mut series = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (breakdown, fraction) = match cfg.method {
            Method::Os => (state.os_epoch()?, None),
            _ => {
                let (b, f) = state.self_training_epoch(epoch)?;
                (b, Some(f))
            }
        };
        let dice = evaluate_dice(&state.model, target_val)?;
        series.push(dice);
        let mut record = EpochRecord {
            epoch,
            train_loss_breakdown: breakdown,
            target_val_dice: dice,
            pseudo_label_fraction: fraction,
            snapshot_path: None,
        };
        if cfg.snapshot_epochs.contains(&epoch) {
            out.checkpoints.insert(epoch, Checkpoint::from_model(&state.model));
        }
        observer(&mut record, &state.model)?;
        out.records.push(record);
        out.timings.push(EpochTiming {
            epoch,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    if !series.is_empty() {
        out.report = Some(stability_report(&series, &cfg.probe_epochs)?);
    }
    out.model = state.model;
    out.log = state.log;
    Ok(out)
}

struct Loop<'a> {
    cfg: &'a AdaptationConfig,
    model: SegModel<f32>,
    theta_star: &'a ParameterSnapshot<f32>,
    target_train: &'a [UnlabeledImage],
    opt: Adam<f32>,
    rng: ChaCha8Rng,
    log: Vec<String>,
    loss_cfg: LossConfig,
}

impl Loop<'_> {
    fn label(&self, p: &ProbMap) -> Result<PseudoLabelMap> {
        match self.cfg.method {
            Method::Ld => ld_pseudo_label(p, self.cfg.threshold.alpha),
            _ => dtpl_pseudo_label(p, &self.cfg.threshold),
        }
    }

    fn label_images(&self, images: &[&Array2<f32>]) -> Result<Vec<PseudoLabelMap>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            for p in self.model.predict(&images_to_tensor(chunk), BnMode::Running)? {
                out.push(self.label(&p)?);
            }
        }
        Ok(out)
    }

    fn bn_mode(&self) -> BnMode {
        if self.cfg.bn_train_mode {
            BnMode::Batch
        } else {
            BnMode::Running
        }
    }

    /// Returns the mean loss breakdown and the labeled pixel share.
    fn self_training_epoch(&mut self, epoch: usize) -> Result<(LossBreakdown, f64)> {
        let epoch_labels = match self.cfg.pseudo_label_refresh {
            RefreshCadence::PerEpoch => {
                let images: Vec<_> = self.target_train.iter().map(|u| &u.image).collect();
                Some(self.label_images(&images)?)
            }
            RefreshCadence::PerBatch => None,
        };
        let mut order: Vec<usize> = (0..self.target_train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = Accumulator::default();
        let (mut labeled, mut pixels) = (0usize, 0usize);

        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                let seed = mix_seed(self.rng.random::<u64>(), i as u64);
                let u = &self.target_train[i];
                match &epoch_labels {
                    Some(all) => {
                        let (img, lab) = self.augmented(&u.image, Some(&all[i]), seed)?;
                        images.push(img);
                        labels.push(lab.expect("labels were passed in"));
                    }
                    None => images.push(self.augmented(&u.image, None, seed)?.0),
                }
            }
            if epoch_labels.is_none() {
                labels = self.label_images(&images.iter().collect::<Vec<_>>())?;
            }
            self.log.push(format!(
                "epoch {epoch} batch {b}: {}",
                idx.iter().map(|&i| self.target_train[i].id.as_str()).collect::<Vec<_>>().join(" ")
            ));
            labeled += labels.iter().map(PseudoLabelMap::labeled_count).sum::<usize>();
            pixels += images.iter().map(|i| i.len()).sum::<usize>();

            let x = images_to_tensor(&images.iter().collect::<Vec<_>>());
            let breakdown = self.step(&x, &PseudoLabelMap::stack(&labels)?)
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("{m} (epoch {epoch}, batch {b})")),
                    other => other,
                })?;
            acc.add(&breakdown);
        }
        Ok((acc.mean(&self.loss_cfg), labeled as f64 / pixels.max(1) as f64))
    }

    fn augmented(
        &self,
        image: &Array2<f32>,
        labels: Option<&PseudoLabelMap>,
        seed: u64,
    ) -> Result<(Array2<f32>, Option<PseudoLabelMap>)> {
        if !self.cfg.augment {
            return Ok((image.clone(), labels.cloned()));
        }
        // labels ride along as a mask with 0 = abstain, so pixels warped in
        // from outside the frame abstain rather than become background
        let mask = match labels {
            Some(l) => l.labels().mapv(|c| c.map_or(0, |c| c as u8 + 1)),
            None => Array2::zeros(image.dim()),
        };
        let s = augment(
            &Sample {
                id: String::new(),
                image: image.clone(),
                mask,
            },
            &self.cfg.augmentation,
            seed,
        );
        let labels = match labels {
            Some(l) => Some(PseudoLabelMap::new(
                s.mask.mapv(|m| m.checked_sub(1).map(u16::from)),
                l.classes(),
            )?),
            None => None,
        };
        Ok((s.image, labels))
    }

    fn step(&mut self, x: &Tensor<f32>, labels: &PseudoLabelMap) -> Result<LossBreakdown> {
        let (logits, cache) = self.model.forward_with_cache(x, self.bn_mode())?;
        let probs = ProbMap::stack(&logits_to_probmaps(&logits)?)?;
        let (breakdown, grad) =
            total_adaptation_loss_grad(&probs, labels, self.model.params(), self.theta_star, &self.loss_cfg)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite adaptation loss {}", breakdown.total)));
        }
        let dlogits = stacked_grad_to_tensor(&softmax_backward(&probs, &grad.probs), x.n);
        let mut grads = self.model.backward(&cache, dlogits);
        for (g, wc) in grads.iter_mut().zip(&grad.params) {
            for (a, b) in g.iter_mut().zip(wc) {
                *a += *b;
            }
        }
        if self.cfg.bn_train_mode {
            self.model.update_running_stats(&cache, BN_MOMENTUM);
        }
        self.opt.step(self.model.params_mut(), &grads);
        Ok(breakdown)
    }

    /// One sweep of batch-norm re-estimation (plus optional scale/shift
    /// entropy steps), reporting the resulting self-entropy.
    fn os_epoch(&mut self) -> Result<LossBreakdown> {
        let mut order: Vec<usize> = (0..self.target_train.len()).collect();
        order.shuffle(&mut self.rng);
        let batches: Vec<Tensor<f32>> = order
            .chunks(self.cfg.batch_size)
            .map(|idx| images_to_tensor(&idx.iter().map(|&i| &self.target_train[i].image).collect::<Vec<_>>()))
            .collect();
        for idx in order.chunks(self.cfg.batch_size) {
            self.log.push(format!(
                "bn sweep: {}",
                idx.iter().map(|&i| self.target_train[i].id.as_str()).collect::<Vec<_>>().join(" ")
            ));
        }
        self.model = adapt_bn_statistics(&self.model, &batches, &self.cfg.bn_adapt)?;
        let mut acc = Accumulator::default();
        for chunk in self.target_train.chunks(EVAL_BATCH) {
            let x = images_to_tensor(&chunk.iter().map(|u| &u.image).collect::<Vec<_>>());
            let probs = ProbMap::stack(&self.model.predict(&x, BnMode::Running)?)?;
            let h = self_entropy(&probs);
            if !h.is_finite() {
                return Err(Error::Numerical("non-finite self-entropy after BN adaptation".into()));
            }
            acc.add(&LossBreakdown::compose(0.0, h, 0.0, 0, &self.loss_cfg));
        }
        Ok(acc.mean(&self.loss_cfg))
    }
}

#[derive(Default)]
struct Accumulator {
    adaptation: f64,
    entropy: f64,
    wc: f64,
    labeled: usize,
    n: usize,
}

impl Accumulator {
    fn add(&mut self, b: &LossBreakdown) {
        self.adaptation += b.adaptation;
        self.entropy += b.self_entropy;
        self.wc += b.wc_penalty;
        self.labeled += b.labeled_pixel_count;
        self.n += 1;
    }

    fn mean(&self, cfg: &LossConfig) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown::compose(self.adaptation / n, self.entropy / n, self.wc / n, self.labeled, cfg)
    }
}
