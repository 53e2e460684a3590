//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::Rng;
use sfuda_core::{ProbMap, PseudoLabelMap};

/// Row-wise softmax of `logits`, computed directly.
pub fn softmax(logits: &Array3<f64>) -> Array3<f64> {
    let mut out = logits.clone();
    let (h, w, c) = logits.dim();
    for y in 0..h {
        for x in 0..w {
            let m = (0..c).map(|k| logits[[y, x, k]]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (logits[[y, x, k]] - m).exp()).sum();
            for k in 0..c {
                out[[y, x, k]] = (logits[[y, x, k]] - m).exp() / z;
            }
        }
    }
    out
}

pub fn random_logits(rng: &mut impl Rng, h: usize, w: usize, c: usize, scale: f64) -> Array3<f64> {
    Array3::from_shape_fn((h, w, c), |_| rng.random_range(-scale..scale))
}

pub fn random_probs(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> ProbMap {
    let scale = rng.random_range(0.5..8.0);
    ProbMap::new(softmax(&random_logits(rng, h, w, c, scale))).unwrap()
}

/// Each pixel labelled with probability `keep`, uniformly over classes.
pub fn random_labels(rng: &mut impl Rng, h: usize, w: usize, c: usize, keep: f64) -> PseudoLabelMap {
    let labels = Array2::from_shape_fn((h, w), |_| {
        rng.random_bool(keep).then(|| rng.random_range(0..c) as u16)
    });
    PseudoLabelMap::new(labels, c).unwrap()
}

/// First index of the maximum.
pub fn argmax(p: &Array3<f64>, y: usize, x: usize) -> usize {
    let c = p.dim().2;
    let mut best = 0;
    for k in 1..c {
        if p[[y, x, k]] > p[[y, x, best]] {
            best = k;
        }
    }
    best
}

/// Per-pixel rule evaluated by brute force. A pixel predicted as class `c`
/// with confidence `q` is kept when fewer than `ceil(alpha * n_c)` pixels of
/// that class are strictly more confident, and (if given) `q > lambda`.
/// `alpha` is the exact rational `alpha_num / alpha_den`.
pub fn threshold_oracle(
    p: &Array3<f64>,
    alpha_num: usize,
    alpha_den: usize,
    lambda: Option<f64>,
) -> Array2<Option<u16>> {
    let (h, w, _) = p.dim();
    let pixels: Vec<(usize, usize, usize, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let c = argmax(p, y, x);
            (y, x, c, p[[y, x, c]])
        })
        .collect();
    let mut out = Array2::from_elem((h, w), None);
    for &(y, x, c, q) in &pixels {
        let population = pixels.iter().filter(|t| t.2 == c).count();
        let k = (alpha_num * population).div_ceil(alpha_den).max(1);
        let above = pixels.iter().filter(|t| t.2 == c && t.3 > q).count();
        let floor_ok = lambda.is_none_or(|l| q > l);
        if above < k && floor_ok {
            out[[y, x]] = Some(c as u16);
        }
    }
    out
}

/// Every labelled pixel of `a` carries the same label in `b`.
pub fn is_subset(a: &PseudoLabelMap, b: &PseudoLabelMap) -> bool {
    a.labels()
        .iter()
        .zip(b.labels().iter())
        .all(|(x, y)| x.is_none() || x == y)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` at `x[i]`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}
