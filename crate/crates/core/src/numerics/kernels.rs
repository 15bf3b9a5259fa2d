//! Forward kernels shared by the tape and by tape-free callers.

use super::{Real, Tensor};
use crate::error::{shape_err, Result};

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = logits.dims2()?;
    let mut out = logits.data().to_vec();
    if cols > 0 {
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Returns the normalized output and the per-row inverse RMS.
pub(crate) fn rms_norm_forward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (rows, d) = x.dims2()?;
    if d == 0 {
        return shape_err("rms_norm over zero-length rows");
    }
    if gain.len() != d {
        return shape_err(format!("rms_norm gain has {} entries, rows have {d}", gain.len()));
    }
    let eps = T::lit(RMS_EPS);
    let dn = T::lit(d as f64);
    let g = gain.data();
    let mut out = vec![T::zero(); rows * d];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let ms = row.iter().map(|v| *v * *v).sum::<T>() / dn;
        let s = T::one() / (ms + eps).sqrt();
        inv.push(s);
        for (j, v) in row.iter().enumerate() {
            out[r * d + j] = *v * s * g[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}

/// T5-style RMS normalization with elementwise gain.
pub fn rms_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    rms_norm_forward(x, gain).map(|(y, _)| y)
}

/// `[c, h, w]` to `[c*k*k, h*w]` patches with zero padding `k/2`.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        dst_row[xo] = src_row[(xo as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        plane[sy as usize * w + (xo as isize + dx) as usize] += src[y * w + xo];
                    }
                }
            }
        }
    }
    x
}
