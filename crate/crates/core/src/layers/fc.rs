use std::borrow::Cow;

use crate::binkernels::{sign, BitMatrix};
use crate::error::{Error, Result};
use crate::layers::{reference, Activation};
use crate::tensor::{gemm, FloatTensor, IntTensor, Real, Rng, Tensor};

/// Fully connected layer, weights `[out, in]`. When `binarized`, the forward
/// pass sees `sign(W)` while updates go to the real-valued masters.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer<T> {
    pub weight: FloatTensor<T>,
    pub bias: Option<Vec<T>>,
    pub binarized: bool,
}

#[derive(Clone, Debug)]
pub struct FcGrads<T> {
    pub dx: Option<FloatTensor<T>>,
    pub dweight: Vec<T>,
    pub dbias: Option<Vec<T>>,
}

impl<T: Real> FcLayer<T> {
    pub fn new(inputs: usize, outputs: usize, bias: bool, binarized: bool, rng: &mut Rng, std: f64) -> Self {
        FcLayer {
            weight: Tensor::from_vec(vec![outputs, inputs], rng.normal_vec(outputs * inputs, std)).expect("fc shape"),
            bias: bias.then(|| vec![T::zero(); outputs]),
            binarized,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn effective_weight(&self) -> Cow<'_, [T]> {
        if self.binarized {
            Cow::Owned(self.weight.data().iter().map(|&w| sign(w)).collect())
        } else {
            Cow::Borrowed(self.weight.data())
        }
    }

    /// `sign(W)` packed one row per output neuron.
    pub fn packed_weights(&self) -> BitMatrix<u64> {
        let cols = self.in_dim();
        let w = self.weight.data();
        BitMatrix::from_fn(self.out_dim(), cols, |r, c| w[r * cols + c] >= T::zero())
    }

    fn check<U>(&self, x: &Tensor<U>) -> Result<usize> {
        match *x.shape() {
            [n, d] if d == self.in_dim() => Ok(n),
            _ => Err(Error::ShapeMismatch {
                expected: vec![x.shape()[0], self.in_dim()],
                actual: x.shape().to_vec(),
            }),
        }
    }

    /// Training-path forward: `x * W_eff^T (+ b)` via gemm.
    pub fn forward(&self, x: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let n = self.check(x)?;
        let (inp, out) = (self.in_dim(), self.out_dim());
        let mut y = vec![T::zero(); n * out];
        gemm(false, true, n, out, inp, T::one(), x.data(), &self.effective_weight(), T::zero(), &mut y);
        if let Some(b) = &self.bias {
            for row in y.chunks_mut(out) {
                for (v, &bb) in row.iter_mut().zip(b) {
                    *v = *v + bb;
                }
            }
        }
        Tensor::from_vec(vec![n, out], y)
    }

    pub fn backward(&self, x: &FloatTensor<T>, dout: &FloatTensor<T>, need_dx: bool) -> Result<FcGrads<T>> {
        let n = self.check(x)?;
        let (inp, out) = (self.in_dim(), self.out_dim());
        let mut dweight = vec![T::zero(); out * inp];
        gemm(true, false, out, inp, n, T::one(), dout.data(), x.data(), T::zero(), &mut dweight);
        if self.binarized {
            for (g, &w) in dweight.iter_mut().zip(self.weight.data()) {
                if w.abs() > T::one() {
                    *g = T::zero();
                }
            }
        }
        let dbias = self.bias.as_ref().map(|_| {
            let mut db = vec![T::zero(); out];
            for row in dout.data().chunks(out) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d = *d + g;
                }
            }
            db
        });
        let dx = if need_dx {
            let mut dx = vec![T::zero(); n * inp];
            gemm(false, false, n, inp, out, T::one(), dout.data(), &self.effective_weight(), T::zero(), &mut dx);
            Some(Tensor::from_vec(vec![n, inp], dx)?)
        } else {
            None
        };
        Ok(FcGrads { dx, dweight, dbias })
    }

    /// Integer inputs through a binarized layer; exact.
    pub fn forward_int(&self, x: &IntTensor) -> Result<IntTensor> {
        let n = self.check(x)?;
        self.require_binarized()?;
        Tensor::from_vec(vec![n, self.out_dim()], reference::dense_int(x.data(), n, &self.packed_weights())?)
    }

    /// `+1` / `-1` inputs through a binarized layer via XNOR / popcount.
    pub fn forward_bipolar(&self, x: &IntTensor) -> Result<IntTensor> {
        let n = self.check(x)?;
        self.require_binarized()?;
        Tensor::from_vec(vec![n, self.out_dim()], reference::dense_bipolar(x.data(), n, &self.packed_weights())?)
    }

    fn require_binarized(&self) -> Result<()> {
        if self.binarized {
            Ok(())
        } else {
            Err(Error::InvalidConfig("integer forward requires a binarized layer".into()))
        }
    }

    /// Run-time forward. Bias (if any) is applied on the real-valued route only.
    pub fn forward_eval(&self, x: &Activation<T>) -> Result<Activation<T>> {
        match x {
            Activation::Int(xi) if self.binarized => Ok(Activation::Int(self.forward_int(xi)?)),
            Activation::Bipolar(xi) if self.binarized => Ok(Activation::Int(self.forward_bipolar(xi)?)),
            _ => {
                let xr = x.to_real();
                let n = self.check(&xr)?;
                let mut y = reference::dense_real(xr.data(), n, self.in_dim(), &self.effective_weight(), self.out_dim());
                if let Some(b) = &self.bias {
                    for row in y.chunks_mut(self.out_dim()) {
                        for (v, &bb) in row.iter_mut().zip(b) {
                            *v = *v + bb;
                        }
                    }
                }
                Ok(Activation::Real(Tensor::from_vec(vec![n, self.out_dim()], y)?))
            }
        }
    }
}
