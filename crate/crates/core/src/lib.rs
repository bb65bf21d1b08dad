//! Binarized conditional DCGAN.
//!
//! The generator can run its binarized stages on integers only: weights are
//! `sign`-binarized and bit-packed, and each batchnorm followed by `sign`
//! folds into a single integer threshold. [`modelio`] turns a trained
//! generator into a C header of packed words and thresholds.

pub mod binkernels;
pub mod dataio;
pub mod error;
pub mod layers;
pub mod modelio;
pub mod tensor;
pub mod training;

pub use binkernels::{bin_dot, int_dot, kernel_calls, pack, sign_binarize, BitMatrix, BitWord};
pub use dataio::{load_idx, load_mnist_dir, write_grid, Dataset};
pub use error::{Error, Result};
pub use layers::{
    build_generator, Activation, Arch, Discriminator, Generator, Mode, ScenarioConfig, Trace, PRESET_NAMES,
};
pub use modelio::{fold_and_binarize, verify_export, ExportBundle, VerifyReport};
pub use tensor::{FloatTensor, IntTensor, Real, Rng, Tensor};
pub use training::{train, train_step, TrainConfig, TrainState};
