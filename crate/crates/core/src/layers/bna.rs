//! Batchnorm followed by an activation, and its folded integer threshold form.
//!
//! With `BN(a) = gamma * (a - mean) * inv_std + beta`, the sign of `BN(a)`
//! flips at `tau = mean - beta / (gamma * inv_std)`. At run time a binarized
//! BNA on integer input is a single comparison against `round(tau)`; the
//! comparison direction follows the sign of `gamma * inv_std`.

use crate::binkernels::{round_half_away, sign};
use crate::error::{Error, Result};
use crate::layers::{reference, Activation};
use crate::tensor::{FloatTensor, IntTensor, Real, Tensor};

pub const BN_EPS: f64 = 1e-4;
pub const BN_MOMENTUM: f64 = 0.9;
/// Folding rejects neurons with `|gamma * inv_std|` below this.
pub const MIN_FOLD_SCALE: f64 = 1e-12;

/// Per-channel batchnorm parameters: scale `gamma`, shift `beta` and the
/// running statistics used at eval time.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BnParams<T> {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `1 / sqrt(running_var + eps)`.
    pub fn inv_std(&self, c: usize) -> T {
        T::one() / (self.running_var[c] + T::cast(BN_EPS)).sqrt()
    }

    /// `(scale, shift)` with `BN(a) = scale * a + shift` under running stats.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma[c] * self.inv_std(c);
                (scale, self.beta[c] - scale * self.running_mean[c])
            })
            .unzip()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `+1` iff `a >= tau_b` (gamma * inv_std > 0).
    Ge,
    /// `+1` iff `a <= tau_b` (gamma * inv_std < 0).
    Le,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    pub tau_b: i32,
    pub dir: Direction,
}

impl Threshold {
    #[inline]
    pub fn apply(&self, a: i32) -> i32 {
        let on = match self.dir {
            Direction::Ge => a >= self.tau_b,
            Direction::Le => a <= self.tau_b,
        };
        if on {
            1
        } else {
            -1
        }
    }
}

/// Solves `gamma * (tau - mean) * inv_std + beta = 0` and rounds.
pub fn bna_fold(gamma: f64, mean: f64, inv_std: f64, beta: f64) -> Result<Threshold> {
    let scale = gamma * inv_std;
    if !(scale.abs() >= MIN_FOLD_SCALE) {
        return Err(Error::DegenerateNeuron {
            layer: String::new(),
            index: 0,
            value: scale.abs(),
        });
    }
    let tau = mean - beta / scale;
    let tau_b = round_half_away(tau).clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32;
    let dir = if scale > 0.0 { Direction::Ge } else { Direction::Le };
    Ok(Threshold { tau, tau_b, dir })
}

/// Threshold activation over `[n, channels, len]`, one threshold per channel.
pub fn bna_forward_threshold(a: &IntTensor, thresholds: &[Threshold]) -> Result<IntTensor> {
    let channels = thresholds.len();
    let len = channel_len(a.shape(), channels)?;
    Ok(Tensor::from_vec(
        a.shape().to_vec(),
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| thresholds[(i / len) % channels].apply(v))
            .collect(),
    )
    .expect("same shape"))
}

/// Which statistics normalize the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchStats {
    /// Mean and variance of the current batch (training).
    Batch,
    /// Tracked running statistics (evaluation).
    Running,
}

/// `sign(BN(a))` computed directly, without folding.
pub fn bna_forward_float<T: Real>(a: &FloatTensor<T>, bn: &BnParams<T>, stats: BatchStats) -> Result<FloatTensor<T>> {
    let channels = bn.channels();
    let len = channel_len(a.shape(), channels)?;
    let (mean, inv_std): (Vec<T>, Vec<T>) = match stats {
        BatchStats::Running => (bn.running_mean.clone(), (0..channels).map(|c| bn.inv_std(c)).collect()),
        BatchStats::Batch => {
            let (m, v) = batch_moments(a.data(), channels, len);
            let inv = v
                .iter()
                .map(|&v| T::cast(1.0 / (v + BN_EPS).sqrt()))
                .collect();
            (m.into_iter().map(T::cast).collect(), inv)
        }
    };
    Ok(a.map_indexed(|i, v| {
        let c = (i / len) % channels;
        sign(bn.gamma[c] * (v - mean[c]) * inv_std[c] + bn.beta[c])
    }))
}

impl<T: Copy> Tensor<T> {
    fn map_indexed(&self, mut f: impl FnMut(usize, T) -> T) -> Tensor<T> {
        let data = self.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
        Tensor::from_vec(self.shape().to_vec(), data).expect("same shape")
    }
}

fn channel_len(shape: &[usize], channels: usize) -> Result<usize> {
    let per_sample: usize = shape[1..].iter().product();
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::ShapeMismatch {
            expected: vec![shape[0], channels],
            actual: shape.to_vec(),
        });
    }
    Ok(per_sample / channels)
}

/// Per-channel mean and biased variance over `[n, channels, len]`.
fn batch_moments<T: Real>(x: &[T], channels: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (x.len() / channels) as f64;
    let mut sum = vec![0.0f64; channels];
    for (i, &v) in x.iter().enumerate() {
        sum[(i / len) % channels] += v.as_f64();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let mut sq = vec![0.0f64; channels];
    for (i, &v) in x.iter().enumerate() {
        let c = (i / len) % channels;
        let d = v.as_f64() - mean[c];
        sq[c] += d * d;
    }
    (mean, sq.iter().map(|s| s / count).collect())
}

/// Batchnorm + activation. The activation is `sign` (with a straight-through
/// gradient inside `[-1, 1]`) when binarized, ReLU otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct BnaLayer<T> {
    pub bn: BnParams<T>,
    pub binarized: bool,
}

/// Saved forward state for the backward pass.
#[derive(Clone, Debug)]
pub struct BnaCache<T> {
    xhat: Vec<T>,
    pre: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    len: usize,
}

impl<T: Real> BnaLayer<T> {
    pub fn new(channels: usize, binarized: bool) -> Self {
        BnaLayer {
            bn: BnParams::new(channels),
            binarized,
        }
    }

    pub fn channels(&self) -> usize {
        self.bn.channels()
    }

    /// Training forward with batch statistics. Does not touch running stats.
    pub fn forward_train(&self, x: &FloatTensor<T>) -> Result<(FloatTensor<T>, BnaCache<T>)> {
        let channels = self.channels();
        let len = channel_len(x.shape(), channels)?;
        let (batch_mean, batch_var) = batch_moments(x.data(), channels, len);
        let inv_std: Vec<T> = batch_var
            .iter()
            .map(|&v| T::cast(1.0 / (v + BN_EPS).sqrt()))
            .collect();
        let mean: Vec<T> = batch_mean.iter().map(|&m| T::cast(m)).collect();
        let mut xhat = Vec::with_capacity(x.len());
        let mut pre = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.data().iter().enumerate() {
            let c = (i / len) % channels;
            let h = (v - mean[c]) * inv_std[c];
            let y = self.bn.gamma[c] * h + self.bn.beta[c];
            xhat.push(h);
            pre.push(y);
            out.push(if self.binarized { sign(y) } else { y.max(T::zero()) });
        }
        let cache = BnaCache {
            xhat,
            pre,
            inv_std,
            batch_mean,
            batch_var,
            len,
        };
        Ok((Tensor::from_vec(x.shape().to_vec(), out)?, cache))
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BnaCache<T>, dout: &FloatTensor<T>) -> (FloatTensor<T>, Vec<T>, Vec<T>) {
        let channels = self.channels();
        let len = cache.len;
        let count = T::cast((dout.len() / channels) as f64);
        let dpre: Vec<T> = dout
            .data()
            .iter()
            .zip(&cache.pre)
            .map(|(&g, &y)| {
                let pass = if self.binarized { y.abs() <= T::one() } else { y > T::zero() };
                if pass {
                    g
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut dgamma = vec![T::zero(); channels];
        let mut dbeta = vec![T::zero(); channels];
        for (i, (&g, &h)) in dpre.iter().zip(&cache.xhat).enumerate() {
            let c = (i / len) % channels;
            dgamma[c] = dgamma[c] + g * h;
            dbeta[c] = dbeta[c] + g;
        }
        let dx = dpre
            .iter()
            .zip(&cache.xhat)
            .enumerate()
            .map(|(i, (&g, &h))| {
                let c = (i / len) % channels;
                self.bn.gamma[c] * cache.inv_std[c] / count * (count * g - dbeta[c] - h * dgamma[c])
            })
            .collect();
        (
            Tensor::from_vec(dout.shape().to_vec(), dx).expect("same shape"),
            dgamma,
            dbeta,
        )
    }

    /// Folds the batch statistics of `cache` into the running statistics.
    pub fn commit(&mut self, cache: &BnaCache<T>, momentum: f64) {
        for c in 0..self.channels() {
            let m = momentum * self.bn.running_mean[c].as_f64() + (1.0 - momentum) * cache.batch_mean[c];
            let v = momentum * self.bn.running_var[c].as_f64() + (1.0 - momentum) * cache.batch_var[c];
            self.bn.running_mean[c] = T::cast(m);
            self.bn.running_var[c] = T::cast(v);
        }
    }

    /// Per-channel folded thresholds; `layer` names the layer in errors.
    pub fn thresholds(&self, layer: &str) -> Result<Vec<Threshold>> {
        (0..self.channels())
            .map(|c| {
                bna_fold(
                    self.bn.gamma[c].as_f64(),
                    self.bn.running_mean[c].as_f64(),
                    self.bn.inv_std(c).as_f64(),
                    self.bn.beta[c].as_f64(),
                )
                .map_err(|e| match e {
                    Error::DegenerateNeuron { value, .. } => Error::DegenerateNeuron {
                        layer: layer.to_string(),
                        index: c,
                        value,
                    },
                    other => other,
                })
            })
            .collect()
    }

    /// Run-time forward with running statistics. Binarized + integer input
    /// uses the integer threshold comparison.
    pub fn forward_eval(&self, x: &Activation<T>, layer: &str) -> Result<Activation<T>> {
        let channels = self.channels();
        let len = channel_len(x.shape(), channels)?;
        match x.as_int() {
            Some(xi) if self.binarized => Ok(Activation::Bipolar(bna_forward_threshold(xi, &self.thresholds(layer)?)?)),
            _ => {
                let (scale, shift) = self.bn.affine();
                let y = reference::channel_affine(x.to_real().data(), channels, len, &scale, &shift);
                let shape = x.shape().to_vec();
                if self.binarized {
                    let s = y.iter().map(|&v| if v >= T::zero() { 1 } else { -1 }).collect();
                    Ok(Activation::Bipolar(Tensor::from_vec(shape, s)?))
                } else {
                    let r = y.into_iter().map(|v| v.max(T::zero())).collect();
                    Ok(Activation::Real(Tensor::from_vec(shape, r)?))
                }
            }
        }
    }
}
