use serde::{Deserialize, Serialize};

use crate::binkernels::{check_one_hot, quantize_input, quantize_label};
use crate::error::{Error, Result};
use crate::layers::bna::{BnaCache, BnaLayer, BN_MOMENTUM};
use crate::layers::conv::{deconv_out_size, DeconvLayer};
use crate::layers::fc::FcLayer;
use crate::layers::{Activation, Gradients, ParamSlot, ScenarioConfig};
use crate::tensor::{FloatTensor, IntTensor, Real, Rng, Tensor};

/// Standard deviation of the normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Layer sizes. The topology is fixed; only the widths vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub z_dim: usize,
    pub classes: usize,
    pub fc_units: usize,
    pub proj_channels: usize,
    /// Spatial size of the projection; the image is four times larger.
    pub proj_size: usize,
    pub deconv_channels: usize,
    pub disc_channels: (usize, usize),
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            z_dim: 100,
            classes: 10,
            fc_units: 600,
            proj_channels: 128,
            proj_size: 7,
            deconv_channels: 64,
            disc_channels: (64, 128),
        }
    }
}

impl Arch {
    pub fn proj_len(&self) -> usize {
        self.proj_channels * self.proj_size * self.proj_size
    }

    pub fn image_size(&self) -> usize {
        deconv_out_size(deconv_out_size(self.proj_size))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.z_dim,
            self.classes,
            self.fc_units,
            self.proj_channels,
            self.proj_size,
            self.deconv_channels,
            self.disc_channels.0,
            self.disc_channels.1,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("zero layer width in {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, float arithmetic.
    Train,
    /// Running statistics; binarized stages run on integers.
    Eval,
}

/// One named intermediate value of an eval-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub name: &'static str,
    pub value: Activation<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace<T> {
    /// `input`, `fc1`, `bna1`, `fc2`, `bna1b`, `deconv1`, `bna2`, `deconv2`.
    pub stages: Vec<Stage<T>>,
    /// `tanh(deconv2 + bias)`, `[n, 1, size, size]`.
    pub image: FloatTensor<T>,
}

impl<T> Trace<T> {
    pub fn stage(&self, name: &str) -> Option<&Activation<T>> {
        self.stages.iter().find(|s| s.name == name).map(|s| &s.value)
    }
}

/// Conditional generator: `[z | y] -> fc1 -> bna1 -> fc2 -> bna1b -> reshape
/// -> deconv1 -> bna2 -> deconv2 -> tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub arch: Arch,
    pub scenario: ScenarioConfig,
    pub fc1: FcLayer<T>,
    pub bna1: BnaLayer<T>,
    pub fc2: FcLayer<T>,
    pub bna1b: BnaLayer<T>,
    pub deconv1: DeconvLayer<T>,
    pub bna2: BnaLayer<T>,
    pub deconv2: DeconvLayer<T>,
}

/// Saved train-mode activations for one forward pass.
#[derive(Clone, Debug)]
pub struct GenCache<T> {
    x0: FloatTensor<T>,
    a1: FloatTensor<T>,
    a2: FloatTensor<T>,
    a3: FloatTensor<T>,
    c1: BnaCache<T>,
    c2: BnaCache<T>,
    c3: BnaCache<T>,
    out: FloatTensor<T>,
}

pub fn build_generator<T: Real>(cfg: &ScenarioConfig, arch: Arch, rng: &mut Rng) -> Result<Generator<T>> {
    cfg.validate()?;
    arch.validate()?;
    let s = cfg;
    Ok(Generator {
        arch,
        scenario: cfg.clone(),
        fc1: FcLayer::new(arch.z_dim + arch.classes, arch.fc_units, false, s.bfc, rng, INIT_STD),
        bna1: BnaLayer::new(arch.fc_units, s.bbna1),
        fc2: FcLayer::new(arch.fc_units, arch.proj_len(), false, s.bfc, rng, INIT_STD),
        bna1b: BnaLayer::new(arch.proj_len(), s.bbna1),
        deconv1: DeconvLayer::new(arch.proj_channels, arch.deconv_channels, false, s.bdeconv1, rng, INIT_STD),
        bna2: BnaLayer::new(arch.deconv_channels, s.bbna2),
        deconv2: DeconvLayer::new(arch.deconv_channels, 1, true, s.bdeconv2, rng, INIT_STD),
    })
}

impl<T: Real> Generator<T> {
    /// `[z | y]`, quantized to integers when the scenario says so.
    pub fn input(&self, z: &FloatTensor<T>, y: &FloatTensor<T>) -> Result<Activation<T>> {
        encode_input(&self.scenario, &self.arch, z, y)
    }

    fn proj_shape(&self, n: usize) -> Vec<usize> {
        let a = &self.arch;
        vec![n, a.proj_channels, a.proj_size, a.proj_size]
    }

    /// Train-mode forward with batch statistics. Running statistics are only
    /// updated by [`Generator::commit`].
    pub fn forward_train(&self, z: &FloatTensor<T>, y: &FloatTensor<T>) -> Result<(FloatTensor<T>, GenCache<T>)> {
        let x0 = self.input(z, y)?.to_real();
        let n = x0.shape()[0];
        let (a1, c1) = self.bna1.forward_train(&self.fc1.forward(&x0)?)?;
        let (a2, c2) = self.bna1b.forward_train(&self.fc2.forward(&a1)?)?;
        let a2 = a2.reshape(self.proj_shape(n))?;
        let (a3, c3) = self.bna2.forward_train(&self.deconv1.forward(&a2)?)?;
        let out = self.deconv2.forward(&a3)?.map(|v| v.tanh());
        let cache = GenCache {
            x0,
            a1,
            a2,
            a3,
            c1,
            c2,
            c3,
            out: out.clone(),
        };
        Ok((out, cache))
    }

    /// Gradients of every parameter, in [`Generator::params_mut`] order.
    pub fn backward(&self, cache: &GenCache<T>, dimage: &FloatTensor<T>) -> Result<Gradients<T>> {
        let n = cache.x0.shape()[0];
        let dh4 = Tensor::from_vec(
            dimage.shape().to_vec(),
            dimage
                .data()
                .iter()
                .zip(cache.out.data())
                .map(|(&g, &o)| g * (T::one() - o * o))
                .collect(),
        )?;
        let (da3, dw4, db4) = self.deconv2.backward(&cache.a3, &dh4, true)?;
        let (dh3, dg3, dbeta3) = self.bna2.backward(&cache.c3, &da3.expect("dx requested"));
        let (da2, dw3, _) = self.deconv1.backward(&cache.a2, &dh3, true)?;
        let da2 = da2.expect("dx requested").reshape(vec![n, self.arch.proj_len()])?;
        let (dh2, dg2, dbeta2) = self.bna1b.backward(&cache.c2, &da2);
        let g2 = self.fc2.backward(&cache.a1, &dh2, true)?;
        let (dh1, dg1, dbeta1) = self.bna1.backward(&cache.c1, &g2.dx.expect("dx requested"));
        let g1 = self.fc1.backward(&cache.x0, &dh1, false)?;
        Ok(Gradients {
            tensors: vec![
                g1.dweight,
                dg1,
                dbeta1,
                g2.dweight,
                dg2,
                dbeta2,
                dw3,
                dg3,
                dbeta3,
                dw4,
                db4.expect("deconv2 has a bias"),
            ],
        })
    }

    /// Moves the running statistics towards the batch statistics of `cache`.
    pub fn commit(&mut self, cache: &GenCache<T>) {
        self.bna1.commit(&cache.c1, BN_MOMENTUM);
        self.bna1b.commit(&cache.c2, BN_MOMENTUM);
        self.bna2.commit(&cache.c3, BN_MOMENTUM);
    }

    pub fn forward(&self, z: &FloatTensor<T>, y: &FloatTensor<T>, mode: Mode) -> Result<FloatTensor<T>> {
        match mode {
            Mode::Train => Ok(self.forward_train(z, y)?.0),
            Mode::Eval => Ok(self.forward_trace(z, y)?.image),
        }
    }

    /// Eval-mode forward keeping every intermediate activation.
    pub fn forward_trace(&self, z: &FloatTensor<T>, y: &FloatTensor<T>) -> Result<Trace<T>> {
        let mut stages = Vec::with_capacity(8);
        let mut push = |name, value: Activation<T>| {
            stages.push(Stage { name, value: value.clone() });
            value
        };
        let x = push("input", self.input(z, y)?);
        let n = x.shape()[0];
        let x = push("fc1", self.fc1.forward_eval(&x)?);
        let x = push("bna1", self.bna1.forward_eval(&x, "bna1")?);
        let x = push("fc2", self.fc2.forward_eval(&x)?);
        let x = push("bna1b", self.bna1b.forward_eval(&x, "bna1b")?);
        let x = x.reshape(self.proj_shape(n))?;
        let x = push("deconv1", self.deconv1.forward_eval(&x)?);
        let x = push("bna2", self.bna2.forward_eval(&x, "bna2")?);
        let x = push("deconv2", self.deconv2.forward_eval(&x)?);
        let bias = self.deconv2.bias.as_ref().expect("deconv2 has a bias")[0];
        let image = x.to_real().map(|&v| (v + bias).tanh());
        Ok(Trace { stages, image })
    }

    /// Trainable tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        let s = &self.scenario;
        let (bfc, bd1, bd2) = (s.bfc, s.bdeconv1, s.bdeconv2);
        vec![
            ParamSlot { name: "fc1.w", values: self.fc1.weight.data_mut(), clip: bfc },
            ParamSlot { name: "bna1.gamma", values: &mut self.bna1.bn.gamma, clip: false },
            ParamSlot { name: "bna1.beta", values: &mut self.bna1.bn.beta, clip: false },
            ParamSlot { name: "fc2.w", values: self.fc2.weight.data_mut(), clip: bfc },
            ParamSlot { name: "bna1b.gamma", values: &mut self.bna1b.bn.gamma, clip: false },
            ParamSlot { name: "bna1b.beta", values: &mut self.bna1b.bn.beta, clip: false },
            ParamSlot { name: "deconv1.w", values: self.deconv1.weight.data_mut(), clip: bd1 },
            ParamSlot { name: "bna2.gamma", values: &mut self.bna2.bn.gamma, clip: false },
            ParamSlot { name: "bna2.beta", values: &mut self.bna2.bn.beta, clip: false },
            ParamSlot { name: "deconv2.w", values: self.deconv2.weight.data_mut(), clip: bd2 },
            ParamSlot {
                name: "deconv2.b",
                values: self.deconv2.bias.as_mut().expect("deconv2 has a bias"),
                clip: false,
            },
        ]
    }

    /// Every BNA layer with its name.
    pub fn bna_layers(&self) -> [(&'static str, &BnaLayer<T>); 3] {
        [("bna1", &self.bna1), ("bna1b", &self.bna1b), ("bna2", &self.bna2)]
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Real>(&self) -> Generator<U> {
        let t = |x: &FloatTensor<T>| x.map(|&v| U::cast(v.as_f64()));
        let v = |x: &[T]| x.iter().map(|&v| U::cast(v.as_f64())).collect::<Vec<U>>();
        let fc = |l: &FcLayer<T>| FcLayer {
            weight: t(&l.weight),
            bias: l.bias.as_deref().map(v),
            binarized: l.binarized,
        };
        let dc = |l: &DeconvLayer<T>| DeconvLayer {
            weight: t(&l.weight),
            bias: l.bias.as_deref().map(v),
            binarized: l.binarized,
        };
        let bna = |l: &BnaLayer<T>| BnaLayer {
            bn: crate::layers::BnParams {
                gamma: v(&l.bn.gamma),
                beta: v(&l.bn.beta),
                running_mean: v(&l.bn.running_mean),
                running_var: v(&l.bn.running_var),
            },
            binarized: l.binarized,
        };
        Generator {
            arch: self.arch,
            scenario: self.scenario.clone(),
            fc1: fc(&self.fc1),
            bna1: bna(&self.bna1),
            fc2: fc(&self.fc2),
            bna1b: bna(&self.bna1b),
            deconv1: dc(&self.deconv1),
            bna2: bna(&self.bna2),
            deconv2: dc(&self.deconv2),
        }
    }
}

/// The generator input `[z | y]`, quantized with the scenario's `A` when its
/// input is integer.
pub fn encode_input<T: Real>(
    scenario: &ScenarioConfig,
    arch: &Arch,
    z: &FloatTensor<T>,
    y: &FloatTensor<T>,
) -> Result<Activation<T>> {
    let n = z.shape()[0];
    if z.shape() != [n, arch.z_dim] || y.shape() != [n, arch.classes] {
        return Err(Error::ShapeMismatch {
            expected: vec![n, arch.z_dim, arch.classes],
            actual: [z.shape(), y.shape()].concat(),
        });
    }
    let width = arch.z_dim + arch.classes;
    if scenario.input_as_integer {
        let a = scenario.a_value.ok_or_else(|| Error::InvalidScenario("missing A value".into()))?;
        let (zq, yq) = (quantize_input(z, a)?, quantize_label(y, a)?);
        let data = concat_rows(zq.data(), yq.data(), n);
        Ok(Activation::Int(IntTensor::from_vec(vec![n, width], data)?))
    } else {
        check_one_hot(y)?;
        let data = concat_rows(z.data(), y.data(), n);
        Ok(Activation::Real(Tensor::from_vec(vec![n, width], data)?))
    }
}

fn concat_rows<V: Copy>(a: &[V], b: &[V], n: usize) -> Vec<V> {
    let (wa, wb) = (a.len() / n, b.len() / n);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a[i * wa..(i + 1) * wa]);
        out.extend_from_slice(&b[i * wb..(i + 1) * wb]);
    }
    out
}
