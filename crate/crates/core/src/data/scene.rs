//! Synthetic organ-like scenes: textured background with non-overlapping
//! ellipses and rounded rectangles, one intensity band per class.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PLACEMENT_RETRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Side length in pixels (square images).
    pub image_size: usize,
    /// Including background (class 0).
    pub num_classes: usize,
    /// Inclusive range of shapes drawn per foreground class.
    pub shapes_per_class: (usize, usize),
    /// Gray-level interval per class, background first.
    pub intensity_bands: Vec<(f64, f64)>,
    /// Shape radii as a fraction of the image size.
    pub radius_range: (f64, f64),
    /// Standard deviation of the additive pixel texture.
    pub texture_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            shapes_per_class: (1, 2),
            intensity_bands: vec![(0.10, 0.25), (0.45, 0.60), (0.75, 0.90)],
            radius_range: (0.08, 0.18),
            texture_noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a scene needs at least 2 classes".into()));
        }
        if self.num_classes > u8::MAX as usize {
            return Err(Error::Config("class ids must fit in 8 bits".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        if self.intensity_bands.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} intensity bands for {} classes",
                self.intensity_bands.len(),
                self.num_classes
            )));
        }
        for (i, &(lo, hi)) in self.intensity_bands.iter().enumerate() {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("intensity band {i} ({lo}, {hi}) not within [0, 1]")));
            }
        }
        let (a, b) = self.shapes_per_class;
        if a > b {
            return Err(Error::Config(format!("shapes_per_class range ({a}, {b}) is empty")));
        }
        let (r0, r1) = self.radius_range;
        if !(0.0 < r0 && r0 <= r1 && r1 < 0.5) {
            return Err(Error::Config(format!("radius_range ({r0}, {r1}) must satisfy 0 < min <= max < 0.5")));
        }
        if !(self.texture_noise >= 0.0 && self.texture_noise.is_finite()) {
            return Err(Error::Config("texture_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Image in `[0, 1]` with its class-id mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
}

#[derive(Clone, Copy, Debug)]
enum Outline {
    Ellipse,
    RoundedRect,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    outline: Outline,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        match self.outline {
            Outline::Ellipse => u * u + v * v <= 1.0,
            Outline::RoundedRect => u.powi(4) + v.powi(4) <= 1.0,
        }
    }

    fn pixels(&self, size: usize) -> Option<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        let reach = self.rx.max(self.ry).ceil() as isize + 1;
        let (cy, cx) = (self.cy.round() as isize, self.cx.round() as isize);
        for y in cy - reach..=cy + reach {
            for x in cx - reach..=cx + reach {
                if self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                        return None;
                    }
                    out.push((y as usize, x as usize));
                }
            }
        }
        (!out.is_empty()).then_some(out)
    }
}

/// Renders one scene; identical `(spec, seed)` pairs give identical samples.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.image_size;
    let size = n as f64;
    let band = |rng: &mut ChaCha8Rng, c: usize| {
        let (lo, hi) = spec.intensity_bands[c];
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let bg = band(&mut rng, 0);
    let mut base = Array2::from_elem((n, n), bg);
    let mut mask = Array2::<u8>::zeros((n, n));

    for class in 1..spec.num_classes {
        let (lo, hi) = spec.shapes_per_class;
        let count = rng.random_range(lo..=hi);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let (r0, r1) = spec.radius_range;
                let shape = Shape {
                    outline: if rng.random_bool(0.5) {
                        Outline::Ellipse
                    } else {
                        Outline::RoundedRect
                    },
                    cy: rng.random_range(0.0..size),
                    cx: rng.random_range(0.0..size),
                    ry: rng.random_range(r0..=r1) * size,
                    rx: rng.random_range(r0..=r1) * size,
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                };
                let Some(pixels) = shape.pixels(n) else { continue };
                if pixels.iter().any(|&(y, x)| mask[[y, x]] != 0) {
                    continue;
                }
                let level = band(&mut rng, class);
                for (y, x) in pixels {
                    mask[[y, x]] = class as u8;
                    base[[y, x]] = level;
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not place a class-{class} shape after {PLACEMENT_RETRIES} attempts (seed {seed}); \
                     reduce shapes_per_class or radius_range"
                )));
            }
        }
    }

    let image = if spec.texture_noise > 0.0 {
        let noise = Normal::new(0.0, spec.texture_noise).unwrap();
        base.mapv(|v| quantize(v + noise.sample(&mut rng)))
    } else {
        base.mapv(quantize)
    };
    Ok(Sample {
        id: format!("scene-{seed}"),
        image,
        mask,
    })
}

/// Clips to `[0, 1]` and rounds to the nearest 8-bit gray level, so images
/// survive a PNG round trip exactly.
pub fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}
