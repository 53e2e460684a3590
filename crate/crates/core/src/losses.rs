//! Self-training objectives.
//!
//! - [`cross_entropy_pseudo`]: masked cross entropy against pseudo labels.
//! - [`entropy_increase_loss`]: `-(y - p) log p`, which down-weights pixels the
//!   model already predicts confidently. It decomposes as cross entropy plus
//!   `p log p`, so minimising it raises the prediction's self-entropy.
//! - [`self_entropy`]: mean Shannon entropy of the prediction.
//! - [`weight_consolidation_penalty`]: L1 distance to the frozen source
//!   parameters.
//!
//! Every loss has a `*_grad` companion returning the gradient with respect
//! to the probabilities; [`softmax_backward`] carries it back to logits.
//! Losses over pixels are means, so a batch can be evaluated by stacking
//! its maps with [`ProbMap::stack`].

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Array3, ArrayView3, Axis};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{check_structure, ParamTensor, ParameterSnapshot};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LOG_EPS: f64 = 1e-8;

const SUM_TOLERANCE: f64 = 1e-5;

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0).ln()
}

/// Per-pixel class probabilities, `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    values: Array3<f64>,
}

impl ProbMap {
    /// Validates that every pixel is a probability vector.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (h, w, c) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Argument(format!(
                "probability map must be non-empty, got {h}x{w}x{c}"
            )));
        }
        for ((y, x), lane) in values
            .lanes(Axis(2))
            .into_iter()
            .enumerate()
            .map(|(i, l)| ((i / w, i % w), l))
        {
            let mut sum = 0.0;
            for &v in lane.iter() {
                if !v.is_finite() {
                    return Err(Error::Argument(format!(
                        "non-finite probability at pixel ({y}, {x})"
                    )));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Argument(format!(
                        "probability {v} outside [0, 1] at pixel ({y}, {x})"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Argument(format!(
                    "probabilities at pixel ({y}, {x}) sum to {sum}"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Softmax over the class axis of `H x W x C` logits.
    pub fn from_logits(logits: ArrayView3<'_, f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("non-finite logit".into()));
        }
        let mut values = logits.to_owned();
        for mut lane in values.lanes_mut(Axis(2)) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        Ok(Self { values })
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        Self {
            values: Array3::from_elem((height, width, classes), 1.0 / classes as f64),
        }
    }

    /// Concatenates maps along the row axis; all must share width and classes.
    pub fn stack(maps: &[ProbMap]) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Argument("cannot stack zero probability maps".into()));
        }
        let views: Vec<_> = maps.iter().map(|m| m.values.view()).collect();
        let values = concatenate(Axis(0), &views)
            .map_err(|e| Error::Argument(format!("cannot stack probability maps: {e}")))?;
        Ok(Self { values })
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn classes(&self) -> usize {
        self.values.dim().2
    }

    pub fn pixel_count(&self) -> usize {
        let (h, w, _) = self.values.dim();
        h * w
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    /// Index of the most probable class per pixel; ties go to the lowest index.
    pub fn argmax(&self) -> Array2<usize> {
        let (h, w, _) = self.values.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let lane = self.values.slice(ndarray::s![y, x, ..]);
            let mut best = 0;
            for (c, &v) in lane.iter().enumerate() {
                if v > lane[best] {
                    best = c;
                }
            }
            best
        })
    }
}

/// Per-pixel pseudo labels: a class index or abstain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelMap {
    labels: Array2<Option<u16>>,
    classes: usize,
}

impl PseudoLabelMap {
    pub fn new(labels: Array2<Option<u16>>, classes: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().flatten().find(|&&c| c as usize >= classes) {
            return Err(Error::Argument(format!(
                "pseudo label class {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self { labels, classes })
    }

    pub fn abstain(height: usize, width: usize, classes: usize) -> Self {
        Self {
            labels: Array2::from_elem((height, width), None),
            classes,
        }
    }

    /// Labels every pixel with the given class ids.
    pub fn from_mask(mask: &Array2<u8>, classes: usize) -> Result<Self> {
        Self::new(mask.mapv(|c| Some(c as u16)), classes)
    }

    /// Builds from the one-hot encoding; an all-zero pixel abstains.
    pub fn from_one_hot(one_hot: &Array3<u8>) -> Result<Self> {
        let (h, w, c) = one_hot.dim();
        let mut labels = Array2::from_elem((h, w), None);
        for ((y, x), slot) in labels.indexed_iter_mut() {
            let mut found = None;
            for k in 0..c {
                match one_hot[[y, x, k]] {
                    0 => {}
                    1 if found.is_none() => found = Some(k as u16),
                    _ => {
                        return Err(Error::Argument(format!(
                            "pixel ({y}, {x}) is not one-hot or abstain"
                        )))
                    }
                }
            }
            *slot = found;
        }
        Ok(Self { labels, classes: c })
    }

    pub fn to_one_hot(&self) -> Array3<u8> {
        let (h, w) = self.labels.dim();
        let mut out = Array3::zeros((h, w, self.classes));
        for ((y, x), l) in self.labels.indexed_iter() {
            if let Some(c) = l {
                out[[y, x, *c as usize]] = 1;
            }
        }
        out
    }

    pub fn stack(maps: &[PseudoLabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero label maps".into()))?;
        if maps.iter().any(|m| m.classes != first.classes) {
            return Err(Error::Argument("label maps disagree on class count".into()));
        }
        let views: Vec<_> = maps.iter().map(|m| m.labels.view()).collect();
        let labels = concatenate(Axis(0), &views)
            .map_err(|e| Error::Argument(format!("cannot stack label maps: {e}")))?;
        Ok(Self {
            labels,
            classes: first.classes,
        })
    }

    pub fn labels(&self) -> &Array2<Option<u16>> {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

fn check_pair(p: &ProbMap, y: &PseudoLabelMap) -> Result<()> {
    let (h, w, c) = p.dim();
    if (h, w) != y.dim() || c != y.classes() {
        return Err(Error::Argument(format!(
            "shape mismatch: probabilities {h}x{w}x{c}, labels {:?}x{}",
            y.dim(),
            y.classes()
        )));
    }
    Ok(())
}

fn labeled_pixels(y: &PseudoLabelMap) -> impl Iterator<Item = ((usize, usize), usize)> + '_ {
    y.labels
        .indexed_iter()
        .filter_map(|(idx, l)| l.map(|c| (idx, c as usize)))
}

/// Mean over labelled pixels of `-log p[label]`; zero when nothing is labelled.
pub fn cross_entropy_pseudo(p: &ProbMap, y: &PseudoLabelMap) -> Result<f64> {
    check_pair(p, y)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((r, c), label) in labeled_pixels(y) {
        sum -= clamped_ln(p.values[[r, c, label]]);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub fn cross_entropy_pseudo_grad(p: &ProbMap, y: &PseudoLabelMap) -> Result<(f64, Array3<f64>)> {
    check_pair(p, y)?;
    let n = y.labeled_count();
    let mut grad = Array3::zeros(p.dim());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n as f64;
    let mut sum = 0.0;
    for ((r, c), label) in labeled_pixels(y) {
        let q = p.values[[r, c, label]];
        sum -= clamped_ln(q);
        if q >= LOG_EPS {
            grad[[r, c, label]] = -scale / q;
        }
    }
    Ok((sum * scale, grad))
}

/// Mean over labelled pixels of `-sum_c (y_c - p_c) log p_c`.
pub fn entropy_increase_loss(p: &ProbMap, y: &PseudoLabelMap) -> Result<f64> {
    entropy_increase_loss_grad(p, y).map(|(v, _)| v)
}

pub fn entropy_increase_loss_grad(
    p: &ProbMap,
    y: &PseudoLabelMap,
) -> Result<(f64, Array3<f64>)> {
    check_pair(p, y)?;
    let classes = p.classes();
    let n = y.labeled_count();
    let mut grad = Array3::zeros(p.dim());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n as f64;
    let mut sum = 0.0;
    for ((r, c), label) in labeled_pixels(y) {
        for k in 0..classes {
            let q = p.values[[r, c, k]];
            let target = if k == label { 1.0 } else { 0.0 };
            let log_q = clamped_ln(q);
            sum -= (target - q) * log_q;
            let mut d = log_q;
            if q >= LOG_EPS {
                d -= (target - q) / q;
            }
            grad[[r, c, k]] = d * scale;
        }
    }
    Ok((sum * scale, grad))
}

/// Mean over all pixels of the Shannon entropy (nats).
pub fn self_entropy(p: &ProbMap) -> f64 {
    let n = p.pixel_count() as f64;
    -p.values.iter().map(|&q| q * clamped_ln(q)).sum::<f64>() / n
}

pub fn self_entropy_grad(p: &ProbMap) -> (f64, Array3<f64>) {
    let scale = 1.0 / p.pixel_count() as f64;
    let grad = p.values.mapv(|q| {
        let mut d = -clamped_ln(q);
        if q >= LOG_EPS {
            d -= 1.0;
        }
        d * scale
    });
    (self_entropy(p), grad)
}

/// Chain rule through softmax: `dL/dz_c = p_c (g_c - sum_k p_k g_k)`.
pub fn softmax_backward(p: &ProbMap, grad_p: &Array3<f64>) -> Array3<f64> {
    let mut out = grad_p.clone();
    for (mut g, q) in out.lanes_mut(Axis(2)).into_iter().zip(p.values.lanes(Axis(2))) {
        let dot: f64 = g.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
        for (gi, &qi) in g.iter_mut().zip(q.iter()) {
            *gi = qi * (*gi - dot);
        }
    }
    out
}

/// `sum_i |theta_i - theta*_i|` over every scalar parameter.
pub fn weight_consolidation_penalty<T: Float>(
    theta: &[ParamTensor<T>],
    anchor: &ParameterSnapshot<T>,
) -> Result<f64> {
    check_structure(theta, anchor.entries())?;
    Ok(theta
        .iter()
        .zip(anchor.entries())
        .flat_map(|(a, b)| a.values.iter().zip(&b.values))
        .map(|(&x, &x0)| (x - x0).abs().to_f64().unwrap())
        .sum())
}

/// `sign(theta - theta*)` with the subgradient at zero taken as 0.
pub fn weight_consolidation_subgradient<T: Float>(
    theta: &[ParamTensor<T>],
    anchor: &ParameterSnapshot<T>,
) -> Result<Vec<Vec<T>>> {
    check_structure(theta, anchor.entries())?;
    Ok(theta
        .iter()
        .zip(anchor.entries())
        .map(|(a, b)| {
            a.values
                .iter()
                .zip(&b.values)
                .map(|(&x, &x0)| {
                    let d = x - x0;
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect()
        })
        .collect())
}

/// Optional image-wide self-entropy term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    #[default]
    None,
    /// Adds `+H(p)`: entropy minimisation.
    Min,
    /// Adds `-H(p)`: entropy maximisation.
    Max,
}

impl EntropyMode {
    pub fn sign(self) -> f64 {
        match self {
            EntropyMode::None => 0.0,
            EntropyMode::Min => 1.0,
            EntropyMode::Max => -1.0,
        }
    }
}

impl FromStr for EntropyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "-" => Ok(EntropyMode::None),
            "min" => Ok(EntropyMode::Min),
            "max" => Ok(EntropyMode::Max),
            other => Err(Error::Config(format!(
                "unknown entropy mode {other:?} (expected none, min or max)"
            ))),
        }
    }
}

impl fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntropyMode::None => "none",
            EntropyMode::Min => "min",
            EntropyMode::Max => "max",
        })
    }
}

/// Loss composition switches and coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub use_ei: bool,
    pub entropy_mode: EntropyMode,
    pub entropy_coefficient: f64,
    pub use_wc: bool,
    pub wc_coefficient: f64,
    /// Divide the L1 penalty by the parameter count.
    pub wc_normalized: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_ei: false,
            entropy_mode: EntropyMode::None,
            entropy_coefficient: 1.0,
            use_wc: false,
            wc_coefficient: 1.0,
            wc_normalized: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("entropy_coefficient", self.entropy_coefficient),
            ("wc_coefficient", self.wc_coefficient),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Weight multiplying the raw self-entropy in the total.
    pub fn entropy_weight(&self) -> f64 {
        self.entropy_mode.sign() * self.entropy_coefficient
    }

    /// Weight multiplying the reported WC penalty in the total.
    pub fn wc_weight(&self) -> f64 {
        if self.use_wc {
            self.wc_coefficient
        } else {
            0.0
        }
    }
}

/// Scalar components of one evaluation of the adaptation objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adaptation: f64,
    pub self_entropy: f64,
    pub wc_penalty: f64,
    pub total: f64,
    pub labeled_pixel_count: usize,
}

impl LossBreakdown {
    pub fn compose(
        adaptation: f64,
        self_entropy: f64,
        wc_penalty: f64,
        labeled_pixel_count: usize,
        cfg: &LossConfig,
    ) -> Self {
        Self {
            adaptation,
            self_entropy,
            wc_penalty,
            total: adaptation + cfg.entropy_weight() * self_entropy + cfg.wc_weight() * wc_penalty,
            labeled_pixel_count,
        }
    }

    /// Residual of the composition invariant under `cfg`.
    pub fn composition_residual(&self, cfg: &LossConfig) -> f64 {
        (self.total
            - (self.adaptation
                + cfg.entropy_weight() * self.self_entropy
                + cfg.wc_weight() * self.wc_penalty))
            .abs()
    }
}

/// Gradients of the total objective.
#[derive(Clone, Debug)]
pub struct AdaptationGrad<T> {
    /// With respect to the probabilities, same shape as the map.
    pub probs: Array3<f64>,
    /// With respect to each parameter tensor, in snapshot order.
    pub params: Vec<Vec<T>>,
}

fn wc_terms<T: Float>(
    theta: &[ParamTensor<T>],
    anchor: &ParameterSnapshot<T>,
    cfg: &LossConfig,
) -> Result<(f64, f64)> {
    let raw = weight_consolidation_penalty(theta, anchor)?;
    if cfg.wc_normalized {
        let n = anchor.scalar_count().max(1) as f64;
        Ok((raw / n, 1.0 / n))
    } else {
        Ok((raw, 1.0))
    }
}

/// Combines the adaptation loss, optional self-entropy term and WC penalty.
pub fn total_adaptation_loss<T: Float>(
    p: &ProbMap,
    y: &PseudoLabelMap,
    theta: &[ParamTensor<T>],
    anchor: &ParameterSnapshot<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let adaptation = if cfg.use_ei {
        entropy_increase_loss(p, y)?
    } else {
        cross_entropy_pseudo(p, y)?
    };
    let (penalty, _) = wc_terms(theta, anchor, cfg)?;
    Ok(LossBreakdown::compose(
        adaptation,
        self_entropy(p),
        penalty,
        y.labeled_count(),
        cfg,
    ))
}

pub fn total_adaptation_loss_grad<T: Float>(
    p: &ProbMap,
    y: &PseudoLabelMap,
    theta: &[ParamTensor<T>],
    anchor: &ParameterSnapshot<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, AdaptationGrad<T>)> {
    cfg.validate()?;
    let (adaptation, mut probs) = if cfg.use_ei {
        entropy_increase_loss_grad(p, y)?
    } else {
        cross_entropy_pseudo_grad(p, y)?
    };
    let (entropy, entropy_grad) = self_entropy_grad(p);
    let ew = cfg.entropy_weight();
    if ew != 0.0 {
        probs.scaled_add(ew, &entropy_grad);
    }
    let (penalty, penalty_scale) = wc_terms(theta, anchor, cfg)?;
    let ww = T::from(cfg.wc_weight() * penalty_scale).unwrap();
    let params = if cfg.wc_weight() != 0.0 {
        weight_consolidation_subgradient(theta, anchor)?
            .into_iter()
            .map(|g| g.into_iter().map(|s| s * ww).collect())
            .collect()
    } else {
        theta.iter().map(|t| vec![T::zero(); t.values.len()]).collect()
    };
    let breakdown = LossBreakdown::compose(adaptation, entropy, penalty, y.labeled_count(), cfg);
    Ok((breakdown, AdaptationGrad { probs, params }))
}
