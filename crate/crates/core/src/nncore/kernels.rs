//! Raw dense-array kernels shared by the tape ops.
//!
//! Reductions (row means/variances, softmax normalizers, log-sum-exp)
//! accumulate in f64 regardless of the element type.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewD};

use super::element::Element;

/// `a · b` with optional transposes, dispatching to the GEMM backend.
pub fn matmul<E: Element>(
    a: ArrayView2<E>,
    ta: bool,
    b: ArrayView2<E>,
    tb: bool,
) -> Array2<E> {
    let a = if ta { a.reversed_axes() } else { a };
    let b = if tb { b.reversed_axes() } else { b };
    a.dot(&b)
}

pub fn gelu_value<E: Element>(x: E) -> E {
    // tanh approximation
    let x = x.as_f64();
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    E::from_f64(0.5 * x * (1.0 + u.tanh()))
}

pub fn gelu_derivative<E: Element>(x: E) -> E {
    let x = x.as_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    E::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

/// Row-wise softmax over the last axis of a 2-D view, with max subtraction
/// and f64 accumulation.
pub fn softmax_rows<E: Element>(x: ArrayView2<E>) -> Array2<E> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            let e = (v.as_f64() - max).exp();
            sum += e;
            *v = E::from_f64(e);
        }
        for v in row.iter_mut() {
            *v = E::from_f64(v.as_f64() / sum);
        }
    }
    out
}

/// Per-row mean and inverse standard deviation over the last axis.
pub fn layernorm_stats<E: Element>(x: ArrayView2<E>, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut means = Vec::with_capacity(x.nrows());
    let mut inv_stds = Vec::with_capacity(x.nrows());
    for row in x.rows() {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        means.push(mean);
        inv_stds.push(1.0 / (var + eps).sqrt());
    }
    (means, inv_stds)
}

/// Numerically-stable log-sum-exp of a flat slice.
pub fn log_sum_exp<E: Element>(logits: &[E]) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let sum: f64 = logits.iter().map(|v| (v.as_f64() - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of a flat logit slice (f64 accumulation), for inference
/// confidences.
pub fn softmax_vec<E: Element>(logits: &[E]) -> Vec<E> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| E::from_f64(e / sum)).collect()
}

/// Sum all elements in f64.
pub fn sum_all<E: Element>(x: &ArrayViewD<E>) -> f64 {
    x.iter().map(|v| v.as_f64()).sum()
}

/// Unfold a padded `[c, h, w]` image into `[h*w, c*kh*kw]` columns for a
/// stride-1 `kh×kw` convolution with symmetric zero padding `pad`.
pub fn im2col<E: Element>(x: ArrayView3<E>, kh: usize, kw: usize, pad: usize) -> Array2<E> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<E>::zeros((h * w, c * kh * kw));
    for oy in 0..h {
        for ox in 0..w {
            let row_idx = oy * w + ox;
            let mut col = 0;
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        col += kw;
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[[row_idx, col]] = x[[ci, iy as usize, ix as usize]];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add `[h*w, c*kh*kw]` columns back into a
/// `[c, h, w]` image.
pub fn col2im<E: Element>(
    cols: ArrayView2<E>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array3<E> {
    let mut x = Array3::<E>::zeros((c, h, w));
    for oy in 0..h {
        for ox in 0..w {
            let row_idx = oy * w + ox;
            let mut col = 0;
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        col += kw;
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[[ci, iy as usize, ix as usize]] =
                                x[[ci, iy as usize, ix as usize]] + cols[[row_idx, col]];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    x
}

/// 2×2/2 max pooling; returns the pooled map and, per output cell, the
/// linear index of the winning input element (for the backward scatter).
pub fn maxpool2x2<E: Element>(x: ArrayView3<E>) -> (Array3<E>, Vec<u32>) {
    let (c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array3::<E>::zeros((c, ho, wo));
    let mut idx = vec![0u32; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = E::neg_infinity();
                let mut best_lin = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                        let v = x[[ci, iy, ix]];
                        if v > best {
                            best = v;
                            best_lin = (ci * h * w + iy * w + ix) as u32;
                        }
                    }
                }
                out[[ci, oy, ox]] = best;
                idx[ci * ho * wo + oy * wo + ox] = best_lin;
            }
        }
    }
    (out, idx)
}

/// Truncated-normal sample: std-scaled draws rejected outside ±2σ.
pub fn truncated_normal<E: Element, R: rand::Rng>(rng: &mut R, std: f64) -> E {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return E::from_f64(z * std);
        }
    }
}
