//! PNG artifacts: Dice curves and pseudo-label overlay panels.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use sfuda_core::{Error, PseudoLabelMap, Result};

const PALETTE: [[u8; 3]; 6] = [
    [230, 60, 60],
    [60, 190, 90],
    [70, 110, 230],
    [230, 190, 50],
    [190, 80, 210],
    [60, 200, 210],
];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io {
            path: path.to_path_buf(),
            source: io,
        },
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Dice against epoch on a `[0, 1]` axis with 0.1 gridlines; the best epoch
/// gets a red marker.
pub fn dice_curve(series: &[f64], path: &Path) -> Result<()> {
    let (w, h, m) = (640u32, 400u32, 40i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (pw, ph) = (w as i64 - 2 * m, h as i64 - 2 * m);
    for k in 0..=10 {
        let y = m + ph - ph * k / 10;
        line(&mut img, (m, y), (m + pw, y), Rgb([225, 225, 225]));
    }
    line(&mut img, (m, m), (m, m + ph), Rgb([0, 0, 0]));
    line(&mut img, (m, m + ph), (m + pw, m + ph), Rgb([0, 0, 0]));
    let n = series.len();
    let point = |i: usize, v: f64| {
        let x = if n > 1 { m + pw * i as i64 / (n as i64 - 1) } else { m + pw / 2 };
        (x, m + ph - (v.clamp(0.0, 1.0) * ph as f64).round() as i64)
    };
    for i in 1..n {
        line(&mut img, point(i - 1, series[i - 1]), point(i, series[i]), Rgb([40, 90, 200]));
    }
    if let Some((bi, bv)) = series.iter().copied().enumerate().fold(None, |best: Option<(usize, f64)>, (i, v)| {
        match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        }
    }) {
        let (x, y) = point(bi, bv);
        for d in -3..=3 {
            line(&mut img, (x - 3, y + d), (x + 3, y + d), Rgb([210, 40, 40]));
        }
    }
    save(&img, path)
}

fn gray(image: &Array2<f32>, x: usize, y: usize) -> [u8; 3] {
    let g = (image[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

fn tint(base: [u8; 3], color: [u8; 3]) -> [u8; 3] {
    std::array::from_fn(|i| ((base[i] as u16 + color[i] as u16) / 2) as u8)
}

/// Side-by-side panel: image, each labeling in `overlays`, then the ground
/// truth. Foreground classes are tinted, background is darkened and
/// abstaining pixels are left as they are.
pub fn overlay_panel(image: &Array2<f32>, overlays: &[&PseudoLabelMap], truth: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = image.dim();
    let tiles = overlays.len() + 2;
    let gap = 2;
    let mut img = RgbImage::from_pixel((tiles * (w + gap) - gap) as u32, h as u32, Rgb([255, 255, 255]));
    for y in 0..h {
        for x in 0..w {
            let base = gray(image, x, y);
            img.put_pixel(x as u32, y as u32, Rgb(base));
            for (t, labels) in overlays.iter().enumerate() {
                let px = match labels.labels()[[y, x]] {
                    Some(c) if c > 0 => tint(base, PALETTE[(c as usize - 1) % PALETTE.len()]),
                    Some(_) => [base[0] / 2, base[1] / 2, base[2] / 2],
                    None => base,
                };
                img.put_pixel(((t + 1) * (w + gap) + x) as u32, y as u32, Rgb(px));
            }
            let c = truth[[y, x]] as usize;
            let px = if c > 0 { tint(base, PALETTE[(c - 1) % PALETTE.len()]) } else { [base[0] / 2, base[1] / 2, base[2] / 2] };
            img.put_pixel(((tiles - 1) * (w + gap) + x) as u32, y as u32, Rgb(px));
        }
    }
    save(&img, path)
}
