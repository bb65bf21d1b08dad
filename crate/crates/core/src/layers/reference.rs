//! Straight-loop kernels for the run-time path.
//!
//! The model's eval path and the export bundle's runtime both call these, so
//! an exported model reproduces the model's eval output operation for
//! operation. Integer variants only add and subtract.

use crate::binkernels::{bin_dot, int_dot, pack_bipolar_row, BitMatrix, BitWord};
use crate::error::Result;
use crate::layers::conv::ConvGeom;
use crate::tensor::Real;

/// `x [n, in] * w[out, in]^T`.
pub fn dense_real<T: Real>(x: &[T], n: usize, inputs: usize, w: &[T], outputs: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * outputs];
    for b in 0..n {
        let xr = &x[b * inputs..(b + 1) * inputs];
        for o in 0..outputs {
            let wr = &w[o * inputs..(o + 1) * inputs];
            let mut acc = T::zero();
            for (&a, &c) in xr.iter().zip(wr) {
                acc = acc + a * c;
            }
            out[b * outputs + o] = acc;
        }
    }
    out
}

/// Integer inputs against packed `+1` / `-1` weights (`int_dot` per row).
pub fn dense_int<W: BitWord>(x: &[i32], n: usize, w: &BitMatrix<W>) -> Result<Vec<i32>> {
    let inputs = w.cols();
    let mut out = Vec::with_capacity(n * w.rows());
    for b in 0..n {
        let xr = &x[b * inputs..(b + 1) * inputs];
        for o in 0..w.rows() {
            out.push(int_dot(xr, w.row(o))?);
        }
    }
    Ok(out)
}

/// `+1` / `-1` inputs against packed weights (XNOR / popcount per row).
pub fn dense_bipolar<W: BitWord>(x: &[i32], n: usize, w: &BitMatrix<W>) -> Result<Vec<i32>> {
    let inputs = w.cols();
    let mut out = Vec::with_capacity(n * w.rows());
    let mut packed = Vec::new();
    for b in 0..n {
        pack_bipolar_row::<W>(&x[b * inputs..(b + 1) * inputs], &mut packed);
        for o in 0..w.rows() {
            out.push(bin_dot(&packed, w.row(o), inputs)?);
        }
    }
    Ok(out)
}

/// Transposed convolution by scattering each input pixel through the kernel.
///
/// `geom` describes the forward convolution whose adjoint this is: the
/// "image" side is the deconv output, the "conv output" side its input.
/// Weights are `[in_ch, out_ch, k, k]`.
pub fn deconv_real<T: Real>(x: &[T], n: usize, in_ch: usize, geom: &ConvGeom, w: &[T]) -> Vec<T> {
    let ConvGeom { c: out_ch, h, w: wd, k, s, p, oh, ow } = *geom;
    let kk = k * k;
    let mut out = vec![T::zero(); n * out_ch * h * wd];
    for b in 0..n {
        for ci in 0..in_ch {
            for iy in 0..oh {
                for ix in 0..ow {
                    let v = x[((b * in_ch + ci) * oh + iy) * ow + ix];
                    if v == T::zero() {
                        continue;
                    }
                    for co in 0..out_ch {
                        let wbase = (ci * out_ch + co) * kk;
                        let obase = (b * out_ch + co) * h * wd;
                        for ky in 0..k {
                            let y = (iy * s + ky) as isize - p as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xx = (ix * s + kx) as isize - p as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                let o = obase + y as usize * wd + xx as usize;
                                out[o] = out[o] + v * w[wbase + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Integer transposed convolution with packed `+1` / `-1` weights.
///
/// `w` has one row per input channel and `out_ch * k * k` columns.
pub fn deconv_int<W: BitWord>(x: &[i32], n: usize, in_ch: usize, geom: &ConvGeom, w: &BitMatrix<W>) -> Vec<i32> {
    let ConvGeom { c: out_ch, h, w: wd, k, s, p, oh, ow } = *geom;
    let kk = k * k;
    let mut out = vec![0i32; n * out_ch * h * wd];
    for b in 0..n {
        for ci in 0..in_ch {
            for iy in 0..oh {
                for ix in 0..ow {
                    let v = x[((b * in_ch + ci) * oh + iy) * ow + ix];
                    if v == 0 {
                        continue;
                    }
                    for co in 0..out_ch {
                        let obase = (b * out_ch + co) * h * wd;
                        for ky in 0..k {
                            let y = (iy * s + ky) as isize - p as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xx = (ix * s + kx) as isize - p as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                let o = obase + y as usize * wd + xx as usize;
                                if w.get(ci, co * kk + ky * k + kx) {
                                    out[o] += v;
                                } else {
                                    out[o] -= v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `scale[c] * x + shift[c]` over `[n, channels, len]`.
pub fn channel_affine<T: Real>(x: &[T], channels: usize, len: usize, scale: &[T], shift: &[T]) -> Vec<T> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / len) % channels;
            scale[c] * v + shift[c]
        })
        .collect()
}
