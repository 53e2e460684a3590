use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugConfig;
use crate::error::{Error, Result};
use crate::losses::{EntropyMode, LossConfig};
use crate::metrics::DEFAULT_PROBE_EPOCHS;
use crate::model::{AdamConfig, BnAdaptConfig};
use crate::pseudolabel::ThresholdConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Double-threshold pseudo labels.
    #[default]
    Fairld,
    /// Intra-class threshold only.
    Ld,
    /// Batch-norm statistics re-estimation, no pseudo labels.
    Os,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fairld" => Ok(Method::Fairld),
            "ld" => Ok(Method::Ld),
            "os" => Ok(Method::Os),
            other => Err(Error::Config(format!("unknown method {other:?} (expected fairld, ld or os)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fairld => "fairld",
            Method::Ld => "ld",
            Method::Os => "os",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshCadence {
    PerBatch,
    #[default]
    PerEpoch,
}

impl FromStr for RefreshCadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_batch" | "per-batch" => Ok(RefreshCadence::PerBatch),
            "per_epoch" | "per-epoch" => Ok(RefreshCadence::PerEpoch),
            other => Err(Error::Config(format!(
                "unknown pseudo-label refresh {other:?} (expected per_batch or per_epoch)"
            ))),
        }
    }
}

/// Target-phase settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub method: Method,
    pub use_wc: bool,
    pub wc_coefficient: f64,
    /// Divide the WC penalty by the parameter count.
    pub wc_normalized: bool,
    pub use_ei: bool,
    pub entropy_mode: EntropyMode,
    pub entropy_coefficient: f64,
    pub threshold: ThresholdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub pseudo_label_refresh: RefreshCadence,
    /// Apply training augmentations to target batches.
    pub augment: bool,
    pub augmentation: AugConfig,
    /// Normalize with batch statistics (and update the running ones) while
    /// self-training. Off by default: the source statistics stay frozen.
    pub bn_train_mode: bool,
    /// Used by the `os` method, one sweep per epoch.
    pub bn_adapt: BnAdaptConfig,
    /// Epochs whose models are kept (in memory and in run directories).
    pub snapshot_epochs: Vec<usize>,
    pub probe_epochs: Vec<usize>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            method: Method::Fairld,
            use_wc: false,
            wc_coefficient: 1.0,
            wc_normalized: false,
            use_ei: false,
            entropy_mode: EntropyMode::None,
            entropy_coefficient: 1.0,
            threshold: ThresholdConfig::default(),
            epochs: 50,
            batch_size: 4,
            learning_rate: 3e-5,
            weight_decay: 3e-5,
            seed: 0,
            pseudo_label_refresh: RefreshCadence::PerEpoch,
            augment: true,
            augmentation: AugConfig::default(),
            bn_train_mode: false,
            bn_adapt: BnAdaptConfig::default(),
            snapshot_epochs: DEFAULT_PROBE_EPOCHS.to_vec(),
            probe_epochs: DEFAULT_PROBE_EPOCHS.to_vec(),
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_ei && self.entropy_mode == EntropyMode::Min {
            return Err(Error::Config(
                "use_ei cannot be combined with entropy_mode=min: the entropy increase loss already \
                 maximises entropy on labeled pixels and the two terms would cancel"
                    .into(),
            ));
        }
        if self.method == Method::Os && (self.use_wc || self.use_ei || self.entropy_mode == EntropyMode::Max) {
            return Err(Error::Config(
                "method os adapts batch-norm statistics only; use_wc, use_ei and entropy_mode=max do not apply".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        check_rates(self.learning_rate, self.weight_decay)?;
        self.threshold.validate()?;
        self.loss_config().validate()?;
        self.bn_adapt.validate()
    }

    /// Loss switches as seen by the objective.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            use_ei: self.use_ei,
            entropy_mode: self.entropy_mode,
            entropy_coefficient: self.entropy_coefficient,
            use_wc: self.use_wc,
            wc_coefficient: self.wc_coefficient,
            wc_normalized: self.wc_normalized,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Source-phase supervised training settings. The defaults train the
/// default network to convergence on the default benchmark in ten epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugConfig,
    /// Running-statistics momentum for batch norm.
    pub bn_momentum: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 3e-5,
            seed: 0,
            augment: true,
            augmentation: AugConfig::default(),
            bn_momentum: 0.1,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!("bn_momentum must be in (0, 1], got {}", self.bn_momentum)));
        }
        check_rates(self.learning_rate, self.weight_decay)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

fn check_rates(lr: f64, wd: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
    }
    if !(wd >= 0.0 && wd.is_finite()) {
        return Err(Error::Config(format!("weight_decay must be >= 0, got {wd}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_recipe() {
        let c = AdaptationConfig::default();
        assert_eq!((c.batch_size, c.learning_rate, c.weight_decay), (4, 3e-5, 3e-5));
        assert_eq!(c.pseudo_label_refresh, RefreshCadence::PerEpoch);
        assert!(c.validate().is_ok());
        let s = SourceConfig::default();
        assert_eq!((s.batch_size, s.learning_rate, s.weight_decay), (4, 1e-3, 3e-5));
    }

    #[test]
    fn ei_with_min_is_rejected() {
        let c = AdaptationConfig {
            use_ei: true,
            entropy_mode: EntropyMode::Min,
            ..AdaptationConfig::default()
        };
        let err = c.validate().unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("entropy_mode=min")));
        let ok = AdaptationConfig {
            use_ei: true,
            entropy_mode: EntropyMode::Max,
            ..AdaptationConfig::default()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn parses_enums() {
        assert_eq!("fairLD".parse::<Method>().unwrap(), Method::Fairld);
        assert!(matches!("dpl".parse::<Method>(), Err(Error::Config(_))));
        assert_eq!("per-batch".parse::<RefreshCadence>().unwrap(), RefreshCadence::PerBatch);
    }
}
