//! Training-time augmentations: blur, shift/scale/rotate, brightness/contrast
//! and grid shuffle. Spatial transforms move the mask with the image
//! (nearest-neighbour for class ids); photometric ones leave it untouched.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub blur: bool,
    pub shift_scale_rotate: bool,
    pub brightness_contrast: bool,
    pub grid_shuffle: bool,
    /// Per-augmentation application probability.
    pub probability: f64,
    /// Upper bound of the blur kernel sigma, in pixels.
    pub blur_sigma: f64,
    /// Maximum translation as a fraction of the image size.
    pub shift_limit: f64,
    /// Maximum relative scale change.
    pub scale_limit: f64,
    /// Maximum rotation in degrees.
    pub rotate_limit: f64,
    pub brightness_limit: f64,
    pub contrast_limit: f64,
    /// Tiles per side for grid shuffle.
    pub grid: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            blur: true,
            shift_scale_rotate: true,
            brightness_contrast: true,
            grid_shuffle: true,
            probability: 0.5,
            blur_sigma: 1.0,
            shift_limit: 0.0625,
            scale_limit: 0.1,
            rotate_limit: 15.0,
            brightness_limit: 0.1,
            contrast_limit: 0.1,
            grid: 2,
        }
    }
}

impl AugConfig {
    pub fn disabled() -> Self {
        Self {
            blur: false,
            shift_scale_rotate: false,
            brightness_contrast: false,
            grid_shuffle: false,
            ..Self::default()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.blur || self.shift_scale_rotate || self.brightness_contrast || self.grid_shuffle
    }
}

/// Applies the enabled augmentations in a fixed order, each with
/// `cfg.probability`. Deterministic in `seed`.
pub fn augment(sample: &Sample, cfg: &AugConfig, seed: u64) -> Sample {
    let mut out = sample.clone();
    if !cfg.any_enabled() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.probability.clamp(0.0, 1.0);
    if cfg.shift_scale_rotate && rng.random_bool(p) {
        let n = out.image.nrows() as f64;
        let dy = rng.random_range(-cfg.shift_limit..=cfg.shift_limit) * n;
        let dx = rng.random_range(-cfg.shift_limit..=cfg.shift_limit) * n;
        let scale = 1.0 + rng.random_range(-cfg.scale_limit..=cfg.scale_limit);
        let angle = rng.random_range(-cfg.rotate_limit..=cfg.rotate_limit);
        let (image, mask) = shift_scale_rotate(&out.image, &out.mask, dy, dx, scale, angle);
        out.image = image;
        out.mask = mask;
    }
    if cfg.grid_shuffle && cfg.grid > 1 && rng.random_bool(p) {
        let n = cfg.grid * cfg.grid;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (image, mask) = grid_shuffle(&out.image, &out.mask, cfg.grid, &perm);
        out.image = image;
        out.mask = mask;
    }
    if cfg.blur && rng.random_bool(p) {
        let sigma = rng.random_range(0.0..=cfg.blur_sigma.max(0.0));
        out.image = gaussian_blur(&out.image, sigma);
    }
    if cfg.brightness_contrast && rng.random_bool(p) {
        let b = rng.random_range(-cfg.brightness_limit..=cfg.brightness_limit);
        let c = 1.0 + rng.random_range(-cfg.contrast_limit..=cfg.contrast_limit);
        out.image = brightness_contrast(&out.image, b, c);
    }
    out
}

/// Separable Gaussian blur with edge replication; `sigma <= 0` is identity.
pub fn gaussian_blur(image: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (h, w) = image.dim();
    let pass = |src: &Array2<f32>, vertical: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let o = j as isize - r;
                let v = if vertical {
                    src[[(y as isize + o).clamp(0, h as isize - 1) as usize, x]]
                } else {
                    src[[y, (x as isize + o).clamp(0, w as isize - 1) as usize]]
                };
                acc += k * v as f64;
            }
            acc as f32
        })
    };
    pass(&pass(image, true), false)
}

/// `c·(x − 0.5) + 0.5 + b`, clipped to `[0, 1]`.
pub fn brightness_contrast(image: &Array2<f32>, brightness: f64, contrast: f64) -> Array2<f32> {
    image.mapv(|x| (contrast * (x as f64 - 0.5) + 0.5 + brightness).clamp(0.0, 1.0) as f32)
}

/// Affine warp about the image centre: rotate by `angle_deg`, scale, then
/// translate by `(dy, dx)` pixels. Out-of-frame samples read as zero image /
/// background. Bilinear for the image, nearest for the mask.
pub fn shift_scale_rotate(
    image: &Array2<f32>,
    mask: &Array2<u8>,
    dy: f64,
    dx: f64,
    scale: f64,
    angle_deg: f64,
) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = angle_deg.to_radians().sin_cos();
    // inverse map: output pixel -> source coordinate
    let src = |y: usize, x: usize| {
        let u = (y as f64 - cy - dy) / scale;
        let v = (x as f64 - cx - dx) / scale;
        (c * u - s * v + cy, s * u + c * v + cx)
    };
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let out_img = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = src(y, x);
        let (sy, sx) = (snap(sy), snap(sx));
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let at = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
                0.0
            } else {
                image[[yy as usize, xx as usize]] as f64
            }
        };
        let mut v = (1.0 - fy) * (1.0 - fx) * at(y0, x0);
        if fx > 0.0 {
            v += (1.0 - fy) * fx * at(y0, x0 + 1.0);
        }
        if fy > 0.0 {
            v += fy * (1.0 - fx) * at(y0 + 1.0, x0);
            if fx > 0.0 {
                v += fy * fx * at(y0 + 1.0, x0 + 1.0);
            }
        }
        v as f32
    });
    let out_mask = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = src(y, x);
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
            0
        } else {
            mask[[ry as usize, rx as usize]]
        }
    });
    (out_img, out_mask)
}

/// Splits the frame into `grid × grid` tiles and places source tile
/// `perm[i]` at position `i` (row-major). Pixels beyond the last full tile
/// stay in place.
pub fn grid_shuffle(
    image: &Array2<f32>,
    mask: &Array2<u8>,
    grid: usize,
    perm: &[usize],
) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = image.dim();
    let (th, tw) = (h / grid, w / grid);
    assert_eq!(perm.len(), grid * grid, "permutation length must be grid²");
    let mut img = image.clone();
    let mut msk = mask.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = (dst / grid * th, dst % grid * tw);
        let (sy, sx) = (src / grid * th, src % grid * tw);
        for y in 0..th {
            for x in 0..tw {
                img[[dy + y, dx + x]] = image[[sy + y, sx + x]];
                msk[[dy + y, dx + x]] = mask[[sy + y, sx + x]];
            }
        }
    }
    (img, msk)
}
