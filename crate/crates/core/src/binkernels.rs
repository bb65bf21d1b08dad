//! Binarization, input quantization, bit packing and XNOR/popcount dot
//! products.
//!
//! Bit mapping: a set bit is weight `+1`, a clear bit is `-1`. Column `c` of a
//! row lives in word `c / BITS` at bit `c % BITS` (LSB first). Pad bits past
//! the last column are always zero, which lets `bin_dot` skip masking.

use std::cell::Cell;
use std::fmt::Debug;
use std::ops::BitXor;

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, IntTensor, Real, Tensor};

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
}

fn count_call() {
    CALLS.with(|c| c.set(c.get() + 1));
}

/// Number of kernel entry points invoked on this thread so far.
pub fn kernel_calls() -> u64 {
    CALLS.with(|c| c.get())
}

/// Storage word for packed bits.
pub trait BitWord: Copy + Eq + Default + Debug + BitXor<Output = Self> + Send + Sync + 'static {
    const BITS: usize;
    fn count_ones(self) -> u32;
    fn bit(self, i: usize) -> bool;
    fn set_bit(&mut self, i: usize);
    fn flip_bit(&mut self, i: usize);
}

macro_rules! impl_bitword {
    ($t:ty) => {
        impl BitWord for $t {
            const BITS: usize = <$t>::BITS as usize;

            #[inline]
            fn count_ones(self) -> u32 {
                <$t>::count_ones(self)
            }

            #[inline]
            fn bit(self, i: usize) -> bool {
                (self >> i) & 1 == 1
            }

            #[inline]
            fn set_bit(&mut self, i: usize) {
                *self |= 1 << i;
            }

            #[inline]
            fn flip_bit(&mut self, i: usize) {
                *self ^= 1 << i;
            }
        }
    };
}

impl_bitword!(u32);
impl_bitword!(u64);

pub fn words_for<W: BitWord>(cols: usize) -> usize {
    cols.div_ceil(W::BITS)
}

/// Bit-packed `{+1, -1}` matrix, one bit per entry, rows padded to whole words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix<W: BitWord = u64> {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<W>,
}

impl<W: BitWord> BitMatrix<W> {
    /// Builds a matrix where `is_positive(r, c)` decides the bit at `(r, c)`.
    pub fn from_fn(rows: usize, cols: usize, mut is_positive: impl FnMut(usize, usize) -> bool) -> Self {
        let words_per_row = words_for::<W>(cols);
        let mut words = vec![W::default(); rows * words_per_row];
        for r in 0..rows {
            let row = &mut words[r * words_per_row..(r + 1) * words_per_row];
            for c in 0..cols {
                if is_positive(r, c) {
                    row[c / W::BITS].set_bit(c % W::BITS);
                }
            }
        }
        BitMatrix {
            rows,
            cols,
            words_per_row,
            words,
        }
    }

    /// Rebuilds a matrix from raw words, checking the padding invariant.
    pub fn from_words(rows: usize, cols: usize, words: Vec<W>) -> Result<Self> {
        let words_per_row = words_for::<W>(cols);
        if words.len() != rows * words_per_row {
            return Err(Error::LengthMismatch {
                left: words.len(),
                right: rows * words_per_row,
            });
        }
        let m = BitMatrix {
            rows,
            cols,
            words_per_row,
            words,
        };
        if words_per_row == 0 {
            return Ok(m);
        }
        for r in 0..rows {
            let last = m.row(r)[words_per_row - 1];
            for b in (cols - (words_per_row - 1) * W::BITS)..W::BITS {
                if last.bit(b) {
                    return Err(Error::Format(format!("pad bit set in row {r}")));
                }
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[W] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[W] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// `true` when entry `(r, c)` is `+1`.
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.words[r * self.words_per_row + c / W::BITS].bit(c % W::BITS)
    }

    /// Flips one entry. Used for fault injection in verification tests.
    pub fn flip(&mut self, r: usize, c: usize) {
        assert!(r < self.rows && c < self.cols, "bit ({r}, {c}) out of range");
        self.words[r * self.words_per_row + c / W::BITS].flip_bit(c % W::BITS);
    }

    /// Same bits, different storage word.
    pub fn repack<V: BitWord>(&self) -> BitMatrix<V> {
        BitMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c))
    }

    /// Back to a `rows x cols` tensor of `+1` / `-1`.
    pub fn unpack<T: Real>(&self) -> FloatTensor<T> {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                data.push(if self.get(r, c) { T::one() } else { -T::one() });
            }
        }
        Tensor::from_vec(vec![self.rows, self.cols], data).expect("non-empty matrix")
    }
}

/// `+1` where `x >= 0` (zero maps to `+1`), `-1` elsewhere.
pub fn sign_binarize<T: Real>(x: &FloatTensor<T>) -> FloatTensor<T> {
    count_call();
    x.map(|&v| sign(v))
}

#[inline]
pub fn sign<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Input scale for `h`-bit signed integers: `2^(h-1) - 1`.
pub fn a_value(h: u32) -> Result<i32> {
    if !(2..=32).contains(&h) {
        return Err(Error::InvalidBitWidth(h));
    }
    Ok(((1i64 << (h - 1)) - 1) as i32)
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// `round(A * z)` elementwise, clamped to `[-A, A]`.
pub fn quantize_input<T: Real>(z: &FloatTensor<T>, a: i32) -> Result<IntTensor> {
    if a < 1 {
        return Err(Error::InvalidScale(a));
    }
    count_call();
    let scale = f64::from(a);
    Ok(z.map(|&v| {
        let q = round_half_away(scale * v.as_f64());
        q.clamp(-scale, scale) as i32
    }))
}

/// `A * y` for a batch of one-hot label rows (`[classes]` or `[batch, classes]`).
pub fn quantize_label<T: Real>(y: &FloatTensor<T>, a: i32) -> Result<IntTensor> {
    if a < 1 {
        return Err(Error::InvalidScale(a));
    }
    count_call();
    check_one_hot(y)?;
    Ok(y.map(|&v| if v == T::one() { a } else { 0 }))
}

pub(crate) fn check_one_hot<T: Real>(y: &FloatTensor<T>) -> Result<()> {
    let classes = *y.shape().last().expect("non-empty shape");
    for (row, chunk) in y.data().chunks(classes).enumerate() {
        let ones = chunk.iter().filter(|&&v| v == T::one()).count();
        let zeros = chunk.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != classes {
            return Err(Error::NotOneHot { row });
        }
    }
    Ok(())
}

/// Packs a 2-D tensor of exact `+1` / `-1` values (a 1-D tensor is one row).
pub fn pack<T: Real, W: BitWord>(signs: &FloatTensor<T>) -> Result<BitMatrix<W>> {
    count_call();
    let (rows, cols) = match *signs.shape() {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0],
                actual: signs.shape().to_vec(),
            })
        }
    };
    for (index, &v) in signs.data().iter().enumerate() {
        if v != T::one() && v != -T::one() {
            return Err(Error::NotBipolar {
                index,
                value: v.as_f64(),
            });
        }
    }
    let data = signs.data();
    Ok(BitMatrix::from_fn(rows, cols, |r, c| data[r * cols + c] > T::zero()))
}

/// Packs one row of `+1` / `-1` integers (anything `> 0` counts as `+1`).
pub fn pack_bipolar_row<W: BitWord>(values: &[i32], out: &mut Vec<W>) {
    out.clear();
    out.resize(words_for::<W>(values.len()), W::default());
    for (c, &v) in values.iter().enumerate() {
        if v > 0 {
            out[c / W::BITS].set_bit(c % W::BITS);
        }
    }
}

/// `sum(a_k * w_k)` over `n` packed `+1` / `-1` entries: `n - 2 * popcount(a ^ w)`.
pub fn bin_dot<W: BitWord>(a: &[W], w: &[W], n: usize) -> Result<i32> {
    count_call();
    if a.len() != w.len() || a.len() != words_for::<W>(n) {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: w.len(),
        });
    }
    let differing: u32 = a.iter().zip(w).map(|(&x, &y)| (x ^ y).count_ones()).sum();
    Ok(n as i32 - 2 * differing as i32)
}

/// `sum(a_k * w_k)` for integer `a` and packed `+1` / `-1` weights, using only
/// additions and subtractions.
pub fn int_dot<W: BitWord>(a: &[i32], w: &[W]) -> Result<i32> {
    count_call();
    if w.len() != words_for::<W>(a.len()) {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: w.len() * W::BITS,
        });
    }
    let mut acc = 0i32;
    for (chunk, &word) in a.chunks(W::BITS).zip(w) {
        for (b, &v) in chunk.iter().enumerate() {
            if word.bit(b) {
                acc += v;
            } else {
                acc -= v;
            }
        }
    }
    Ok(acc)
}
