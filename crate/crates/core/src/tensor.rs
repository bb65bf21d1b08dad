//! Dense row-major tensors, the deterministic RNG, and the small amount of
//! linear algebra the layers need.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Floating point scalar used by the layers.
///
/// Training runs in `f32`; `f64` instances exist so gradients can be checked
/// against finite differences without drowning in rounding noise.
pub trait Real:
    Float + LinalgScalar + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion")
    }

    fn from_int(v: i32) -> Self {
        <Self as FromPrimitive>::from_i32(v).expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Real-valued tensor.
pub type FloatTensor<T = f32> = Tensor<T>;

/// Signed integer tensor. 32 bits cover every accumulator of the reference
/// architecture: the widest fan-in is 3146 and |input| <= 4095.
pub type IntTensor = Tensor<i32>;

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; the batch size for activations.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Replaces the shape, keeping the data untouched.
    pub fn reshape(self, new_shape: impl Into<Vec<usize>>) -> Result<Self> {
        let new_shape = new_shape.into();
        let n = check_shape(&new_shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: new_shape,
            });
        }
        Ok(Tensor {
            shape: new_shape,
            data: self.data,
        })
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone + Default> Tensor<T> {
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![T::default(); n],
        })
    }
}

impl<T: Real> Tensor<T> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl IntTensor {
    pub fn to_real<T: Real>(&self) -> FloatTensor<T> {
        self.map(|&v| T::from_int(v))
    }
}

/// Free-function form of [`Tensor::reshape`].
pub fn reshape<T>(t: Tensor<T>, new_shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
    t.reshape(new_shape)
}

/// Seeded, reproducible random stream (ChaCha8: counter based, portable).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this seed and a tag.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(self.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn uniform_scalar(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_vec<T: Real>(&mut self, n: usize, std: f64) -> Vec<T> {
        let dist = Normal::new(0.0, std).expect("valid std");
        (0..n)
            .map(|_| T::cast(dist.sample(&mut self.inner)))
            .collect()
    }

    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Tensor of independent draws from `[lo, hi)`.
pub fn uniform<T: Real>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<FloatTensor<T>> {
    // `!(lo < hi)` also rejects NaN bounds.
    if !(lo < hi) {
        return Err(Error::EmptyRange { lo, hi });
    }
    let n = check_shape(shape)?;
    let data = (0..n)
        .map(|_| {
            let v = T::cast(rng.uniform_scalar(lo, hi));
            // Narrowing to f32 can round up onto `hi`.
            if v.as_f64() >= hi {
                T::cast(lo)
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// `c = alpha * op(a) * op(b) + beta * c`, all row-major.
///
/// `op(a)` is `m x k` (stored `k x m` when `trans_a`), `op(b)` is `k x n`
/// (stored `n x k` when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    let a = if trans_a {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let b = if trans_b {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}
