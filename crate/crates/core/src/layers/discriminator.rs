use crate::binkernels::check_one_hot;
use crate::error::{Error, Result};
use crate::layers::conv::Conv2d;
use crate::layers::fc::FcLayer;
use crate::layers::generator::{Arch, INIT_STD};
use crate::layers::{Gradients, ParamSlot};
use crate::tensor::{FloatTensor, Real, Rng, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Real-valued conditional discriminator. Labels enter as constant feature
/// maps appended to the input of each convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub classes: usize,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub fc: FcLayer<T>,
}

#[derive(Clone, Debug)]
pub struct DiscCache<T> {
    x1: FloatTensor<T>,
    z1: FloatTensor<T>,
    x2: FloatTensor<T>,
    z2: FloatTensor<T>,
    flat: FloatTensor<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(arch: &Arch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let (d1, d2) = arch.disc_channels;
        let s = arch.proj_size;
        Ok(Discriminator {
            classes: arch.classes,
            conv1: Conv2d::new(1 + arch.classes, d1, rng, INIT_STD),
            conv2: Conv2d::new(d1 + arch.classes, d2, rng, INIT_STD),
            fc: FcLayer::new(d2 * s * s, 1, true, false, rng, INIT_STD),
        })
    }

    /// Logits `[n, 1]` and the cache for [`Discriminator::backward`].
    pub fn forward_logits(&self, image: &FloatTensor<T>, y: &FloatTensor<T>) -> Result<(FloatTensor<T>, DiscCache<T>)> {
        let n = image.shape()[0];
        if image.shape().len() != 4 || image.shape()[1] != 1 || y.shape() != [n, self.classes] {
            return Err(Error::ShapeMismatch {
                expected: vec![n, 1, 0, 0],
                actual: image.shape().to_vec(),
            });
        }
        check_one_hot(y)?;
        let x1 = with_label_maps(image, y)?;
        let z1 = self.conv1.forward(&x1)?;
        let x2 = with_label_maps(&leaky(&z1), y)?;
        let z2 = self.conv2.forward(&x2)?;
        let flat = leaky(&z2).reshape(vec![n, z2.len() / n])?;
        let logits = self.fc.forward(&flat)?;
        Ok((logits, DiscCache { x1, z1, x2, z2, flat }))
    }

    /// `sigmoid(logits)`, `[n, 1]`.
    pub fn forward(&self, image: &FloatTensor<T>, y: &FloatTensor<T>) -> Result<FloatTensor<T>> {
        let (logits, _) = self.forward_logits(image, y)?;
        Ok(logits.map(|&v| T::one() / (T::one() + (-v).exp())))
    }

    /// Parameter gradients (in [`Discriminator::params_mut`] order) and,
    /// when requested, the gradient with respect to the input image.
    pub fn backward(
        &self,
        cache: &DiscCache<T>,
        dlogits: &FloatTensor<T>,
        need_dimage: bool,
    ) -> Result<(Option<FloatTensor<T>>, Gradients<T>)> {
        let gf = self.fc.backward(&cache.flat, dlogits, true)?;
        let dz2 = leaky_backward(&cache.z2, gf.dx.expect("dx requested").data())?;
        let (dx2, dw2, db2) = self.conv2.backward(&cache.x2, &dz2, true)?;
        let dz1 = leaky_backward(&cache.z1, &drop_label_maps(&dx2.expect("dx requested"), self.classes))?;
        let (dx1, dw1, db1) = self.conv1.backward(&cache.x1, &dz1, need_dimage)?;
        let dimage = match dx1 {
            Some(dx1) => {
                let s = dx1.shape();
                let shape = vec![s[0], 1, s[2], s[3]];
                Some(Tensor::from_vec(shape, drop_label_maps(&dx1, self.classes))?)
            }
            None => None,
        };
        let grads = Gradients {
            tensors: vec![dw1, db1, dw2, db2, gf.dweight, gf.dbias.expect("fc has a bias")],
        };
        Ok((dimage, grads))
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        vec![
            ParamSlot { name: "conv1.w", values: self.conv1.weight.data_mut(), clip: false },
            ParamSlot { name: "conv1.b", values: &mut self.conv1.bias, clip: false },
            ParamSlot { name: "conv2.w", values: self.conv2.weight.data_mut(), clip: false },
            ParamSlot { name: "conv2.b", values: &mut self.conv2.bias, clip: false },
            ParamSlot { name: "fc.w", values: self.fc.weight.data_mut(), clip: false },
            ParamSlot {
                name: "fc.b",
                values: self.fc.bias.as_mut().expect("fc has a bias"),
                clip: false,
            },
        ]
    }
}

fn leaky<T: Real>(x: &FloatTensor<T>) -> FloatTensor<T> {
    let slope = T::cast(LEAKY_SLOPE);
    x.map(|&v| if v > T::zero() { v } else { v * slope })
}

fn leaky_backward<T: Real>(z: &FloatTensor<T>, grad: &[T]) -> Result<FloatTensor<T>> {
    let slope = T::cast(LEAKY_SLOPE);
    let data = z
        .data()
        .iter()
        .zip(grad)
        .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
        .collect();
    Tensor::from_vec(z.shape().to_vec(), data)
}

/// Appends one constant `h x w` plane per class to every sample.
fn with_label_maps<T: Real>(x: &FloatTensor<T>, y: &FloatTensor<T>) -> Result<FloatTensor<T>> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let classes = y.shape()[1];
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (c + classes) * plane);
    for b in 0..n {
        out.extend_from_slice(&x.data()[b * c * plane..(b + 1) * c * plane]);
        for &v in y.row(b) {
            out.extend(std::iter::repeat(v).take(plane));
        }
    }
    Tensor::from_vec(vec![n, c + classes, h, w], out)
}

/// Inverse of [`with_label_maps`] for gradients: keeps the leading channels.
fn drop_label_maps<T: Real>(dx: &FloatTensor<T>, classes: usize) -> Vec<T> {
    let (n, c) = (dx.shape()[0], dx.shape()[1]);
    let plane = dx.shape()[2] * dx.shape()[3];
    let keep = (c - classes) * plane;
    (0..n)
        .flat_map(|b| dx.data()[b * c * plane..b * c * plane + keep].iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::uniform;

    fn arch() -> Arch {
        Arch {
            z_dim: 6,
            classes: 3,
            fc_units: 16,
            proj_channels: 4,
            proj_size: 2,
            deconv_channels: 3,
            disc_channels: (4, 6),
        }
    }

    fn labels(rows: &[usize]) -> FloatTensor<f64> {
        let mut v = vec![0.0; rows.len() * 3];
        for (i, &l) in rows.iter().enumerate() {
            v[i * 3 + l] = 1.0;
        }
        Tensor::from_vec(vec![rows.len(), 3], v).unwrap()
    }

    #[test]
    fn output_is_a_probability() {
        let mut rng = Rng::new(1);
        let d = Discriminator::<f64>::new(&arch(), &mut rng).unwrap();
        let img = uniform(&mut rng, &[4, 1, 8, 8], -1.0, 1.0).unwrap();
        let p = d.forward(&img, &labels(&[0, 1, 2, 0])).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let mut rng = Rng::new(2);
        let d = Discriminator::<f64>::new(&arch(), &mut rng).unwrap();
        let img = uniform(&mut rng, &[3, 1, 8, 8], -1.0, 1.0).unwrap();
        let p = d.forward(&img, &labels(&[0, 1, 2])).unwrap();
        let swapped: Vec<f64> = [2, 0, 1].iter().flat_map(|&i| img.data()[i * 64..(i + 1) * 64].to_vec()).collect();
        let img2 = Tensor::from_vec(vec![3, 1, 8, 8], swapped).unwrap();
        let q = d.forward(&img2, &labels(&[2, 0, 1])).unwrap();
        assert_eq!(q.data(), &[p.data()[2], p.data()[0], p.data()[1]]);
    }

    #[test]
    fn zero_weights_give_sigmoid_of_bias() {
        let mut rng = Rng::new(3);
        let mut d = Discriminator::<f64>::new(&arch(), &mut rng).unwrap();
        for slot in d.params_mut() {
            slot.values.iter_mut().for_each(|v| *v = 0.0);
        }
        d.fc.bias = Some(vec![0.7]);
        let img = Tensor::zeros(vec![1, 1, 8, 8]).unwrap();
        let p = d.forward(&img, &labels(&[1])).unwrap();
        assert!((p.data()[0] - 1.0 / (1.0 + (-0.7f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn label_maps_round_trip() {
        let x = Tensor::from_vec(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = labels(&[2, 0]);
        let m = with_label_maps(&x, &y).unwrap();
        assert_eq!(m.shape(), &[2, 4, 1, 2]);
        assert_eq!(&m.data()[..8], &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(drop_label_maps(&m, 3), x.data());
    }
}
