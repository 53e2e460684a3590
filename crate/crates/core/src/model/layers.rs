//! Forward and backward kernels for the segmentation network.
//!
//! Convolutions are "same"-padded with stride 1 and lowered to GEMM through
//! im2col. Batch statistics are accumulated in f64 regardless of `T`.

use super::tensor::{gemm, Mat, Real, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out_row.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    dx.fill(T::zero());
    for ci in 0..c {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    for (x, &g) in src_row.iter().enumerate() {
                        let sx = x as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Square `k x k` convolution (odd `k`), weight layout `[cout, cin, k, k]`.
pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
) -> Tensor<T> {
    let kk = x.c * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight size");
    let plane = x.plane();
    let mut out = Tensor::zeros(x.n, cout, x.h, x.w);
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
    for i in 0..x.n {
        let cols_ref: &[T] = if k == 1 {
            x.sample(i)
        } else {
            im2col(x.sample(i), x.c, x.h, x.w, k, &mut cols);
            &cols
        };
        let o = out.sample_mut(i);
        gemm(Mat::new(weight, cout, kk), Mat::new(cols_ref, kk, plane), T::zero(), o);
        if let Some(b) = bias {
            for (ch, &bv) in b.iter().enumerate() {
                for v in &mut o[ch * plane..(ch + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Accumulates weight (and bias) gradients; returns the input gradient when
/// `need_dx` is set.
pub(crate) fn conv_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    k: usize,
    dout: &Tensor<T>,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let cout = dout.c;
    let kk = x.c * k * k;
    let plane = x.plane();
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
    let mut dcols = vec![T::zero(); kk * plane];
    let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
    for i in 0..x.n {
        let cols_ref: &[T] = if k == 1 {
            x.sample(i)
        } else {
            im2col(x.sample(i), x.c, x.h, x.w, k, &mut cols);
            &cols
        };
        let g = dout.sample(i);
        gemm(Mat::new(g, cout, plane), Mat::new(cols_ref, kk, plane).t(), T::one(), dweight);
        if let Some(dx) = dx.as_mut() {
            if k == 1 {
                gemm(Mat::new(weight, cout, kk).t(), Mat::new(g, cout, plane), T::zero(), dx.sample_mut(i));
            } else {
                gemm(Mat::new(weight, cout, kk).t(), Mat::new(g, cout, plane), T::zero(), &mut dcols);
                col2im(&dcols, x.c, x.h, x.w, k, dx.sample_mut(i));
            }
        }
    }
    if let Some(db) = dbias {
        for i in 0..dout.n {
            for (ch, acc) in db.iter_mut().enumerate() {
                *acc += dout.channel(i, ch).iter().copied().sum::<T>();
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over batch and space.
pub(crate) fn channel_moments<T: Real>(z: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let count = (z.n * z.plane()) as f64;
    let mut mean = vec![0.0; z.c];
    let mut var = vec![0.0; z.c];
    for ch in 0..z.c {
        let mut s = 0.0;
        for i in 0..z.n {
            s += z.channel(i, ch).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut sq = 0.0;
        for i in 0..z.n {
            sq += z
                .channel(i, ch)
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

/// State saved by a batch-norm forward pass for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch moments when normalising with batch statistics.
    pub batch_moments: Option<(Vec<f64>, Vec<f64>)>,
}

/// Normalises with `running` statistics when given, else with batch moments.
pub(crate) fn bn_forward<T: Real>(
    z: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Tensor<T>, BnCache<T>) {
    let (mean, var, batch_moments) = match running {
        Some((m, v)) => (
            m.iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
            v.iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
            None,
        ),
        None => {
            let (m, v) = channel_moments(z);
            (m.clone(), v.clone(), Some((m, v)))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + BN_EPS).sqrt())).collect();
    let mut xhat = Tensor::zeros(z.n, z.c, z.h, z.w);
    let mut y = Tensor::zeros(z.n, z.c, z.h, z.w);
    let plane = z.plane();
    for i in 0..z.n {
        for ch in 0..z.c {
            let m = T::from_f64(mean[ch]);
            let s = inv_std[ch];
            let off = (i * z.c + ch) * plane;
            for j in off..off + plane {
                let xh = (z.data[j] - m) * s;
                xhat.data[j] = xh;
                y.data[j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_moments,
        },
    )
}

pub(crate) fn bn_backward<T: Real>(
    dy: &Tensor<T>,
    gamma: &[T],
    cache: &BnCache<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let plane = dy.plane();
    let count = (dy.n * plane) as f64;
    let mut dz = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
    for ch in 0..dy.c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for i in 0..dy.n {
            let off = (i * dy.c + ch) * plane;
            for j in off..off + plane {
                let g = dy.data[j].as_f64();
                sum_dy += g;
                sum_dy_xhat += g * cache.xhat.data[j].as_f64();
            }
        }
        dbeta[ch] += T::from_f64(sum_dy);
        dgamma[ch] += T::from_f64(sum_dy_xhat);
        let scale = gamma[ch] * cache.inv_std[ch];
        if cache.batch_moments.is_some() {
            let mean_dy = T::from_f64(sum_dy / count);
            let mean_dy_xhat = T::from_f64(sum_dy_xhat / count);
            for i in 0..dy.n {
                let off = (i * dy.c + ch) * plane;
                for j in off..off + plane {
                    dz.data[j] = scale * (dy.data[j] - mean_dy - cache.xhat.data[j] * mean_dy_xhat);
                }
            }
        } else {
            for i in 0..dy.n {
                let off = (i * dy.c + ch) * plane;
                for j in off..off + plane {
                    dz.data[j] = scale * dy.data[j];
                }
            }
        }
    }
    dz
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub(crate) fn relu_backward_inplace<T: Real>(dy: &mut Tensor<T>, out: &Tensor<T>) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling; returns the output and each window's winning offset.
pub(crate) fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; out.data.len()];
    let mut o = 0;
    for i in 0..x.n {
        for ch in 0..x.c {
            let src = x.channel(i, ch);
            for y in 0..oh {
                for xx in 0..ow {
                    let base = 2 * y * x.w + 2 * xx;
                    let mut best = base;
                    for cand in [base + 1, base + x.w, base + x.w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    out.data[o] = src[best];
                    arg[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u32], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let plane_out = dy.plane();
    let plane_in = h * w;
    for (o, &g) in dy.data.iter().enumerate() {
        let map = o / plane_out;
        dx.data[map * plane_in + arg[o] as usize] += g;
    }
    dx
}

/// Source index pairs and the weight of the upper index, per output
/// coordinate, for x2 bilinear resampling with half-pixel centres.
fn upsample_taps(input: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * input)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let ty = upsample_taps(x.h);
    let tx = upsample_taps(x.w);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let plane_out = oh * ow;
    for map in 0..x.n * x.c {
        let src = &x.data[map * x.plane()..(map + 1) * x.plane()];
        let dst = &mut out.data[map * plane_out..(map + 1) * plane_out];
        for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::from_f64(wy);
            for (xx, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::from_f64(wx);
                let top = src[y0 * x.w + x0] + (src[y0 * x.w + x1] - src[y0 * x.w + x0]) * wx;
                let bot = src[y1 * x.w + x0] + (src[y1 * x.w + x1] - src[y1 * x.w + x0]) * wx;
                dst[y * ow + xx] = top + (bot - top) * wy;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let plane_in = h * w;
    for map in 0..dy.n * dy.c {
        let src = &dy.data[map * dy.plane()..(map + 1) * dy.plane()];
        let dst = &mut dx.data[map * plane_in..(map + 1) * plane_in];
        for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::from_f64(wy);
            for (xx, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::from_f64(wx);
                let g = src[y * dy.w + xx];
                let one = T::one();
                dst[y0 * w + x0] += g * (one - wy) * (one - wx);
                dst[y0 * w + x1] += g * (one - wy) * wx;
                dst[y1 * w + x0] += g * wy * (one - wx);
                dst[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor<f64>, wt: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(x.n, cout, x.h, x.w);
        for i in 0..x.n {
            for co in 0..cout {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut s = 0.0;
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    s += wt[((co * x.c + ci) * k + ky) * k + kx]
                                        * x.channel(i, ci)[sy as usize * x.w + sx as usize];
                                }
                            }
                        }
                        out.data[((i * cout + co) * x.h + y) * x.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::from_vec(2, 3, 5, 4, ramp(120, 0.1));
        for k in [1, 3] {
            let wt = ramp(2 * 3 * k * k, 0.05);
            let fast = conv_forward(&x, &wt, None, 2, k);
            let slow = direct_conv(&x, &wt, 2, k);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv^T(g)> and == <w, dW>
        let x = Tensor::from_vec(2, 2, 4, 3, ramp(48, 0.1));
        let wt = ramp(3 * 2 * 9, 0.07);
        let g = Tensor::from_vec(2, 3, 4, 3, ramp(72, 0.03));
        let y = conv_forward(&x, &wt, None, 3, 3);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; wt.len()];
        let dx = conv_backward(&x, &wt, 3, &g, &mut dw, None, true).unwrap();
        let via_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let via_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_vec(1, 2, 3, 4, ramp(24, 0.2));
        let g = Tensor::from_vec(1, 2, 6, 8, ramp(96, 0.05));
        let y = upsample2_forward(&x);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let dx = upsample2_backward(&g);
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::from_vec(1, 1, 2, 2, vec![0.5f64; 4]);
        assert!(upsample2_forward(&x).data.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = Tensor::from_vec(1, 1, 2, 4, vec![1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]);
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data, vec![5.0, 7.0]);
        let dx = maxpool2_backward(&Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]), &arg, 2, 4);
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn batch_norm_normalises_batch() {
        let z = Tensor::from_vec(2, 1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let (y, cache) = bn_forward(&z, &[1.0], &[0.0], None);
        let (m, v) = cache.batch_moments.unwrap();
        assert!((m[0] - 4.5).abs() < 1e-12);
        assert!((v[0] - 5.25).abs() < 1e-12);
        let mean: f64 = y.data.iter().sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
    }
}
