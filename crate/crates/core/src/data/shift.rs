//! Intensity-only domain shifts.
//!
//! | kind        | transform                                  | magnitude range |
//! |-------------|--------------------------------------------|-----------------|
//! | `identity`  | `x`                                        | ignored         |
//! | `invert`    | `(1 - m) x + m (1 - x)`                    | `[0, 1]`        |
//! | `gamma`     | `x^m`                                      | `(0, 10]`       |
//! | `contrast`  | `0.5 + m (x - 0.5)`                        | `[0, 5]`        |
//! | `bias_field`| `x (1 + m g(y, x))`, `g` a seeded linear ramp in `[-1, 1]` | `[0, 1]` |
//! | `noise`     | `x + N(0, m^2)`, seeded                    | `[0, 0.5]`      |
//!
//! Every output is clipped to `[0, 1]`. Masks are never touched.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Identity,
    Invert,
    Gamma,
    Contrast,
    BiasField,
    Noise,
}

impl ShiftKind {
    fn magnitude_range(self) -> (f64, f64) {
        match self {
            ShiftKind::Identity => (f64::NEG_INFINITY, f64::INFINITY),
            ShiftKind::Invert => (0.0, 1.0),
            ShiftKind::Gamma => (f64::MIN_POSITIVE, 10.0),
            ShiftKind::Contrast => (0.0, 5.0),
            ShiftKind::BiasField => (0.0, 1.0),
            ShiftKind::Noise => (0.0, 0.5),
        }
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => ShiftKind::Identity,
            "invert" => ShiftKind::Invert,
            "gamma" => ShiftKind::Gamma,
            "contrast" => ShiftKind::Contrast,
            "bias_field" | "bias-field" => ShiftKind::BiasField,
            "noise" => ShiftKind::Noise,
            other => {
                return Err(Error::Config(format!(
                    "unknown shift kind {other:?} (expected identity, invert, gamma, contrast, bias_field or noise)"
                )))
            }
        })
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::Identity => "identity",
            ShiftKind::Invert => "invert",
            ShiftKind::Gamma => "gamma",
            ShiftKind::Contrast => "contrast",
            ShiftKind::BiasField => "bias_field",
            ShiftKind::Noise => "noise",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DomainShiftSpec {
    pub fn new(kind: ShiftKind, magnitude: f64) -> Self {
        Self {
            kind,
            magnitude,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.magnitude_range();
        if self.kind != ShiftKind::Identity && !(self.magnitude >= lo && self.magnitude <= hi) {
            return Err(Error::Config(format!(
                "{} magnitude {} outside [{lo}, {hi}]",
                self.kind, self.magnitude
            )));
        }
        Ok(())
    }

    /// `kind:magnitude`, e.g. `gamma:2.2`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, mag) = s.split_once(':').unwrap_or((s, "0"));
        let magnitude = mag
            .parse()
            .map_err(|_| Error::Config(format!("bad shift magnitude in {s:?}")))?;
        let spec = Self::new(kind.trim().parse()?, magnitude);
        spec.validate()?;
        Ok(spec)
    }
}

/// The default target-domain shift: darkening gamma, reduced contrast and
/// additive noise.
pub fn default_target_shift() -> Vec<DomainShiftSpec> {
    vec![
        DomainShiftSpec::new(ShiftKind::Gamma, 2.2),
        DomainShiftSpec::new(ShiftKind::Contrast, 0.6),
        DomainShiftSpec::new(ShiftKind::Noise, 0.05),
    ]
}

pub fn apply_domain_shift(image: &Array2<f32>, shift: &DomainShiftSpec) -> Result<Array2<f32>> {
    shift.validate()?;
    let m = shift.magnitude;
    let clip = |v: f64| v.clamp(0.0, 1.0) as f32;
    Ok(match shift.kind {
        ShiftKind::Identity => image.clone(),
        ShiftKind::Invert => image.mapv(|x| clip((1.0 - m) * x as f64 + m * (1.0 - x as f64))),
        ShiftKind::Gamma => image.mapv(|x| clip((x as f64).powf(m))),
        ShiftKind::Contrast => image.mapv(|x| clip(0.5 + m * (x as f64 - 0.5))),
        ShiftKind::BiasField => {
            let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = theta.sin_cos();
            let (h, w) = image.dim();
            let norm = std::f64::consts::SQRT_2;
            Array2::from_shape_fn((h, w), |(y, x)| {
                let u = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                let v = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let g = (u * dy + v * dx) / norm;
                clip(image[[y, x]] as f64 * (1.0 + m * g))
            })
        }
        ShiftKind::Noise => {
            if m == 0.0 {
                image.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
                let normal = Normal::new(0.0, m).unwrap();
                image.mapv(|x| clip(x as f64 + normal.sample(&mut rng)))
            }
        }
    })
}

/// Applies `shifts` in order, reseeding each stochastic step with `seed`.
pub fn apply_shift_chain(image: &Array2<f32>, shifts: &[DomainShiftSpec], seed: u64) -> Result<Array2<f32>> {
    let mut out = image.clone();
    for (i, s) in shifts.iter().enumerate() {
        let step = DomainShiftSpec {
            seed: s.seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
            ..*s
        };
        out = apply_domain_shift(&out, &step)?;
    }
    Ok(out)
}
