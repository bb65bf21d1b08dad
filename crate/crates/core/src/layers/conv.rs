use std::borrow::Cow;

use crate::binkernels::{sign, BitMatrix};
use crate::error::{Error, Result};
use crate::layers::{reference, Activation};
use crate::tensor::{gemm, FloatTensor, Real, Rng, Tensor};

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const PAD: usize = 2;
pub const OUTPUT_PADDING: usize = 1;

/// Samples per im2col block; fixed so results do not depend on thread count.
const BLOCK: usize = 16;

pub fn conv_out_size(size: usize) -> usize {
    (size + 2 * PAD - KERNEL) / STRIDE + 1
}

pub fn deconv_out_size(size: usize) -> usize {
    (size - 1) * STRIDE + KERNEL + OUTPUT_PADDING - 2 * PAD
}

/// Geometry of a strided convolution from a `c x h x w` image to `oh x ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn standard(c: usize, h: usize, w: usize) -> Self {
        ConvGeom {
            c,
            h,
            w,
            k: KERNEL,
            s: STRIDE,
            p: PAD,
            oh: conv_out_size(h),
            ow: conv_out_size(w),
        }
    }

    /// The convolution whose adjoint maps `h x w` up to the deconv output.
    pub fn for_deconv(out_ch: usize, h: usize, w: usize) -> Self {
        let g = ConvGeom::standard(out_ch, deconv_out_size(h), deconv_out_size(w));
        debug_assert_eq!((g.oh, g.ow), (h, w));
        g
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.s + ky) as isize - self.p as isize;
        let x = (ox * self.s + kx) as isize - self.p as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }

    /// Unfolds `nb` images into `cols[c*k*k, nb*oh*ow]`.
    fn im2col<T: Real>(&self, images: &[T], nb: usize, cols: &mut [T]) {
        let (l, width) = (self.out_len(), nb * self.out_len());
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for n in 0..nb {
                        let img = &images[n * self.image_len() + ci * self.h * self.w..];
                        for oy in 0..self.oh {
                            for ox in 0..self.ow {
                                dst[n * l + oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                    Some(i) => img[i],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: accumulates columns back into `nb` images.
    fn col2im<T: Real>(&self, cols: &[T], nb: usize, images: &mut [T]) {
        let (l, width) = (self.out_len(), nb * self.out_len());
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * width..(row + 1) * width];
                    for n in 0..nb {
                        let base = n * self.image_len() + ci * self.h * self.w;
                        for oy in 0..self.oh {
                            for ox in 0..self.ow {
                                if let Some(i) = self.source(oy, ox, ky, kx) {
                                    images[base + i] = images[base + i] + src[n * l + oy * self.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[nb, ch, len]` -> `[ch, nb*len]`.
fn to_channel_major<T: Real>(x: &[T], nb: usize, ch: usize, len: usize, out: &mut [T]) {
    for n in 0..nb {
        for c in 0..ch {
            let src = &x[(n * ch + c) * len..(n * ch + c + 1) * len];
            out[c * nb * len + n * len..c * nb * len + (n + 1) * len].copy_from_slice(src);
        }
    }
}

/// `[ch, nb*len]` -> `[nb, ch, len]`.
fn from_channel_major<T: Real>(x: &[T], nb: usize, ch: usize, len: usize, out: &mut [T]) {
    for n in 0..nb {
        for c in 0..ch {
            let dst = &mut out[(n * ch + c) * len..(n * ch + c + 1) * len];
            dst.copy_from_slice(&x[c * nb * len + n * len..c * nb * len + (n + 1) * len]);
        }
    }
}

fn check_input<T>(x: &Tensor<T>, ch: usize) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] if c == ch => Ok((n, h, w)),
        _ => Err(Error::ShapeMismatch {
            expected: vec![x.shape()[0], ch, 0, 0],
            actual: x.shape().to_vec(),
        }),
    }
}

fn ste_mask<T: Real>(grad: &mut [T], master: &[T]) {
    for (g, &w) in grad.iter_mut().zip(master) {
        if w.abs() > T::one() {
            *g = T::zero();
        }
    }
}

/// Real-valued strided convolution (discriminator only).
/// Weights `[out_ch, in_ch, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: FloatTensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut Rng, std: f64) -> Self {
        Conv2d {
            weight: Tensor::from_vec(vec![out_ch, in_ch, KERNEL, KERNEL], rng.normal_vec(out_ch * in_ch * KERNEL * KERNEL, std))
                .expect("conv shape"),
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let (n, h, w) = check_input(x, self.in_channels())?;
        let geom = ConvGeom::standard(self.in_channels(), h, w);
        let co = self.out_channels();
        let l = geom.out_len();
        let mut out = vec![T::zero(); n * co * l];
        let mut cols = Vec::new();
        let mut y = Vec::new();
        for start in (0..n).step_by(BLOCK) {
            let nb = BLOCK.min(n - start);
            cols.resize(geom.rows() * nb * l, T::zero());
            y.resize(co * nb * l, T::zero());
            geom.im2col(&x.data()[start * geom.image_len()..], nb, &mut cols);
            gemm(false, false, co, nb * l, geom.rows(), T::one(), self.weight.data(), &cols, T::zero(), &mut y);
            for (c, &b) in self.bias.iter().enumerate() {
                for v in &mut y[c * nb * l..(c + 1) * nb * l] {
                    *v = *v + b;
                }
            }
            from_channel_major(&y, nb, co, l, &mut out[start * co * l..]);
        }
        Tensor::from_vec(vec![n, co, geom.oh, geom.ow], out)
    }

    /// Returns `(dx, dweight, dbias)`; `dx` only when asked for.
    pub fn backward(
        &self,
        x: &FloatTensor<T>,
        dout: &FloatTensor<T>,
        need_dx: bool,
    ) -> Result<(Option<FloatTensor<T>>, Vec<T>, Vec<T>)> {
        let (n, h, w) = check_input(x, self.in_channels())?;
        let geom = ConvGeom::standard(self.in_channels(), h, w);
        let co = self.out_channels();
        let l = geom.out_len();
        let mut dw = vec![T::zero(); self.weight.len()];
        let mut db = vec![T::zero(); co];
        let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
        let (mut cols, mut dy, mut dcols) = (Vec::new(), Vec::new(), Vec::new());
        for start in (0..n).step_by(BLOCK) {
            let nb = BLOCK.min(n - start);
            cols.resize(geom.rows() * nb * l, T::zero());
            dy.resize(co * nb * l, T::zero());
            geom.im2col(&x.data()[start * geom.image_len()..], nb, &mut cols);
            to_channel_major(&dout.data()[start * co * l..], nb, co, l, &mut dy);
            gemm(false, true, co, geom.rows(), nb * l, T::one(), &dy, &cols, T::one(), &mut dw);
            for c in 0..co {
                db[c] = db[c] + dy[c * nb * l..(c + 1) * nb * l].iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_mut() {
                dcols.clear();
                dcols.resize(geom.rows() * nb * l, T::zero());
                gemm(true, false, geom.rows(), nb * l, co, T::one(), self.weight.data(), &dy, T::zero(), &mut dcols);
                geom.col2im(&dcols, nb, &mut dx[start * geom.image_len()..]);
            }
        }
        let dx = dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d)).transpose()?;
        Ok((dx, dw, db))
    }
}

/// Transposed convolution, 5x5, stride 2, pad 2, output padding 1: doubles
/// the spatial size. Weights `[in_ch, out_ch, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvLayer<T> {
    pub weight: FloatTensor<T>,
    pub bias: Option<Vec<T>>,
    pub binarized: bool,
}

impl<T: Real> DeconvLayer<T> {
    pub fn new(in_ch: usize, out_ch: usize, bias: bool, binarized: bool, rng: &mut Rng, std: f64) -> Self {
        DeconvLayer {
            weight: Tensor::from_vec(vec![in_ch, out_ch, KERNEL, KERNEL], rng.normal_vec(in_ch * out_ch * KERNEL * KERNEL, std))
                .expect("deconv shape"),
            bias: bias.then(|| vec![T::zero(); out_ch]),
            binarized,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Weights used by the forward pass: `sign(W)` when binarized.
    pub fn effective_weight(&self) -> Cow<'_, [T]> {
        if self.binarized {
            Cow::Owned(self.weight.data().iter().map(|&w| sign(w)).collect())
        } else {
            Cow::Borrowed(self.weight.data())
        }
    }

    /// `sign(W)` packed as `[in_ch, out_ch*k*k]`.
    pub fn packed_weights(&self) -> BitMatrix<u64> {
        let cols = self.out_channels() * KERNEL * KERNEL;
        let w = self.weight.data();
        BitMatrix::from_fn(self.in_channels(), cols, |r, c| w[r * cols + c] >= T::zero())
    }

    /// Training-path forward (gemm + col2im), bias included.
    pub fn forward(&self, x: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let (n, h, w) = check_input(x, self.in_channels())?;
        let geom = ConvGeom::for_deconv(self.out_channels(), h, w);
        let ci = self.in_channels();
        let l = h * w;
        let weight = self.effective_weight();
        let mut out = vec![T::zero(); n * geom.image_len()];
        let (mut xm, mut cols) = (Vec::new(), Vec::new());
        for start in (0..n).step_by(BLOCK) {
            let nb = BLOCK.min(n - start);
            xm.resize(ci * nb * l, T::zero());
            cols.resize(geom.rows() * nb * l, T::zero());
            to_channel_major(&x.data()[start * ci * l..], nb, ci, l, &mut xm);
            gemm(true, false, geom.rows(), nb * l, ci, T::one(), &weight, &xm, T::zero(), &mut cols);
            geom.col2im(&cols, nb, &mut out[start * geom.image_len()..]);
        }
        if let Some(bias) = &self.bias {
            let plane = geom.h * geom.w;
            for (i, v) in out.iter_mut().enumerate() {
                *v = *v + bias[(i / plane) % geom.c];
            }
        }
        Tensor::from_vec(vec![n, geom.c, geom.h, geom.w], out)
    }

    /// Returns `(dx, dweight, dbias)`. With binarization the weight gradient
    /// passes straight through `sign` where `|W| <= 1`.
    pub fn backward(
        &self,
        x: &FloatTensor<T>,
        dout: &FloatTensor<T>,
        need_dx: bool,
    ) -> Result<(Option<FloatTensor<T>>, Vec<T>, Option<Vec<T>>)> {
        let (n, h, w) = check_input(x, self.in_channels())?;
        let geom = ConvGeom::for_deconv(self.out_channels(), h, w);
        let ci = self.in_channels();
        let l = h * w;
        let weight = self.effective_weight();
        let mut dw = vec![T::zero(); self.weight.len()];
        let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
        let (mut xm, mut dcols, mut dxm) = (Vec::new(), Vec::new(), Vec::new());
        for start in (0..n).step_by(BLOCK) {
            let nb = BLOCK.min(n - start);
            xm.resize(ci * nb * l, T::zero());
            dcols.resize(geom.rows() * nb * l, T::zero());
            to_channel_major(&x.data()[start * ci * l..], nb, ci, l, &mut xm);
            geom.im2col(&dout.data()[start * geom.image_len()..], nb, &mut dcols);
            gemm(false, true, ci, geom.rows(), nb * l, T::one(), &xm, &dcols, T::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                dxm.resize(ci * nb * l, T::zero());
                gemm(false, false, ci, nb * l, geom.rows(), T::one(), &weight, &dcols, T::zero(), &mut dxm);
                from_channel_major(&dxm, nb, ci, l, &mut dx[start * ci * l..]);
            }
        }
        if self.binarized {
            ste_mask(&mut dw, self.weight.data());
        }
        let db = self.bias.as_ref().map(|_| {
            let plane = geom.h * geom.w;
            let mut db = vec![T::zero(); geom.c];
            for (i, &g) in dout.data().iter().enumerate() {
                let c = (i / plane) % geom.c;
                db[c] = db[c] + g;
            }
            db
        });
        let dx = dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d)).transpose()?;
        Ok((dx, dw, db))
    }

    /// Run-time forward. Bias is not applied here (the caller adds it where
    /// the result becomes real-valued). Integer inputs through binarized
    /// weights stay integer.
    pub fn forward_eval(&self, x: &Activation<T>) -> Result<Activation<T>> {
        let (n, h, w) = match *x.shape() {
            [n, c, h, w] if c == self.in_channels() => (n, h, w),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![x.shape()[0], self.in_channels(), 0, 0],
                    actual: x.shape().to_vec(),
                })
            }
        };
        let geom = ConvGeom::for_deconv(self.out_channels(), h, w);
        let shape = vec![n, geom.c, geom.h, geom.w];
        match x.as_int() {
            Some(xi) if self.binarized => {
                let out = reference::deconv_int(xi.data(), n, self.in_channels(), &geom, &self.packed_weights());
                Ok(Activation::Int(Tensor::from_vec(shape, out)?))
            }
            _ => {
                let xr = x.to_real();
                let out = reference::deconv_real(xr.data(), n, self.in_channels(), &geom, &self.effective_weight());
                Ok(Activation::Real(Tensor::from_vec(shape, out)?))
            }
        }
    }
}
