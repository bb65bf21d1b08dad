//! Layer kinds of the generator (FC / B-FC, batchnorm-activation / B-BNA,
//! deconvolution / B-Deconv), the real-valued discriminator, and scenario
//! driven model assembly.

mod bna;
mod conv;
mod discriminator;
mod fc;
mod generator;
pub mod reference;
mod scenario;

pub use bna::{
    bna_fold, bna_forward_float, bna_forward_threshold, BatchStats, BnParams, BnaCache, BnaLayer, Direction,
    Threshold, BN_EPS, BN_MOMENTUM, MIN_FOLD_SCALE,
};
pub use conv::{conv_out_size, deconv_out_size, Conv2d, ConvGeom, DeconvLayer, KERNEL, OUTPUT_PADDING, PAD, STRIDE};
pub use discriminator::{DiscCache, Discriminator, LEAKY_SLOPE};
pub use fc::{FcGrads, FcLayer};
pub use generator::{build_generator, encode_input, Arch, GenCache, Generator, Mode, Stage, Trace, INIT_STD};
pub use scenario::{ScenarioConfig, PRESET_NAMES};

use crate::tensor::{FloatTensor, IntTensor, Real};

/// An activation flowing through the run-time path. Integer variants are
/// exact; `Bipolar` holds only `+1` / `-1`.
#[derive(Clone, Debug, PartialEq)]
pub enum Activation<T> {
    Real(FloatTensor<T>),
    Int(IntTensor),
    Bipolar(IntTensor),
}

impl<T: Real> Activation<T> {
    pub fn shape(&self) -> &[usize] {
        match self {
            Activation::Real(t) => t.shape(),
            Activation::Int(t) | Activation::Bipolar(t) => t.shape(),
        }
    }

    pub fn is_integer(&self) -> bool {
        !matches!(self, Activation::Real(_))
    }

    pub fn to_real(&self) -> FloatTensor<T> {
        match self {
            Activation::Real(t) => t.clone(),
            Activation::Int(t) | Activation::Bipolar(t) => t.to_real(),
        }
    }

    pub fn as_int(&self) -> Option<&IntTensor> {
        match self {
            Activation::Real(_) => None,
            Activation::Int(t) | Activation::Bipolar(t) => Some(t),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> crate::Result<Self> {
        Ok(match self {
            Activation::Real(t) => Activation::Real(t.reshape(shape)?),
            Activation::Int(t) => Activation::Int(t.reshape(shape)?),
            Activation::Bipolar(t) => Activation::Bipolar(t.reshape(shape)?),
        })
    }
}

/// Mutable view of one trainable tensor.
pub struct ParamSlot<'a, T> {
    pub name: &'static str,
    pub values: &'a mut [T],
    /// Master weights of a binarized layer: kept inside `[-1, 1]`.
    pub clip: bool,
}

/// Gradients aligned with a model's `params_mut()` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}
