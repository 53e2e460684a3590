//! Pseudo-label generation from softmax predictions.
//!
//! The intra-class (LD-style) labeler keeps, for each class, the pixels whose
//! confidence is within the top `alpha` fraction of the pixels predicted as
//! that class. The double-threshold labeler additionally requires the
//! confidence to exceed a global floor `lambda`, which filters out
//! low-confidence pixels that the class-relative cutoff alone would admit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ProbMap, PseudoLabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Top fraction kept per class, in `(0, 1]`.
    pub alpha: f64,
    /// Global probability floor, in `[0, 1)`; comparison is strict.
    pub lambda: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            lambda: 0.2,
        }
    }
}

impl ThresholdConfig {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        let cfg = Self { alpha, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1), got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Per-class confidence cutoffs. Classes with no argmax support get
/// `f64::INFINITY`, which labels nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub delta: Vec<f64>,
    pub support_count: Vec<usize>,
}

/// Rank of the cutoff element: `ceil(alpha * n)`, at least 1.
///
/// The product is nudged down by a relative 1e-12 so that e.g. `0.3 * 10`
/// (which is `3.0000000000000004` in binary) selects 3 elements, not 4.
pub fn top_fraction_rank(alpha: f64, n: usize) -> usize {
    let raw = alpha * n as f64;
    let k = (raw - raw.abs() * 1e-12).ceil() as usize;
    k.clamp(1, n.max(1))
}

/// The `ceil(alpha * n)`-th largest value; `+inf` for an empty slice.
pub fn top_fraction_value(values: &[f64], alpha: f64) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    let k = top_fraction_rank(alpha, values.len());
    let mut scratch = values.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    *kth
}

pub fn intra_class_thresholds(p: &ProbMap, alpha: f64) -> Result<ClassThresholds> {
    check_alpha(alpha)?;
    let classes = p.classes();
    let argmax = p.argmax();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for ((y, x), &c) in argmax.indexed_iter() {
        buckets[c].push(p.values()[[y, x, c]]);
    }
    Ok(ClassThresholds {
        delta: buckets.iter().map(|b| top_fraction_value(b, alpha)).collect(),
        support_count: buckets.iter().map(Vec::len).collect(),
    })
}

fn label_with(p: &ProbMap, alpha: f64, floor: Option<f64>) -> Result<PseudoLabelMap> {
    let thresholds = intra_class_thresholds(p, alpha)?;
    let argmax = p.argmax();
    let labels = Array2::from_shape_fn(argmax.dim(), |(y, x)| {
        let c = argmax[[y, x]];
        let q = p.values()[[y, x, c]];
        let keep = q >= thresholds.delta[c] && floor.is_none_or(|l| q > l);
        keep.then_some(c as u16)
    });
    PseudoLabelMap::new(labels, p.classes())
}

/// Intra-class thresholding only (the LD baseline).
pub fn ld_pseudo_label(p: &ProbMap, alpha: f64) -> Result<PseudoLabelMap> {
    label_with(p, alpha, None)
}

/// Double-threshold pseudo labels: argmax class, at or above its intra-class
/// cutoff, and strictly above the global floor.
pub fn dtpl_pseudo_label(p: &ProbMap, cfg: &ThresholdConfig) -> Result<PseudoLabelMap> {
    cfg.validate()?;
    label_with(p, cfg.alpha, Some(cfg.lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    /// Labelled pixels per class.
    pub counts: Vec<usize>,
    /// `counts[c]` over the total pixel count.
    pub fractions: Vec<f64>,
    pub labeled: usize,
    pub total: usize,
}

pub fn label_coverage_stats(y: &PseudoLabelMap) -> CoverageStats {
    let mut counts = vec![0usize; y.classes()];
    for c in y.labels().iter().flatten() {
        counts[*c as usize] += 1;
    }
    let total = y.labels().len();
    CoverageStats {
        fractions: counts
            .iter()
            .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
            .collect(),
        labeled: counts.iter().sum(),
        counts,
        total,
    }
}
