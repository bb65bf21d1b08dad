use crate::binkernels::BitMatrix;
use crate::error::{Error, Result};
use crate::layers::reference::{channel_affine, deconv_int, deconv_real, dense_bipolar, dense_int, dense_real};
use crate::layers::{
    bna_forward_threshold, encode_input, Activation, Arch, BnaLayer, ConvGeom, Direction, Generator, ScenarioConfig, Stage,
    Threshold, Trace,
};
use crate::modelio::codec::{frame, unframe, Reader, Writer};
use crate::modelio::{read_arch, read_scenario, write_arch, write_scenario};
use crate::tensor::{uniform, FloatTensor, IntTensor, Rng, Tensor};

pub const BUNDLE_MAGIC: [u8; 4] = *b"BDCX";
pub const BUNDLE_VERSION: u32 = 1;

/// Weights of an FC or deconvolution stage.
#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    /// `sign(W)` packed into 32-bit words; bit = 1 means `+1`. FC: one row
    /// per output. Deconv: one row per input channel, `out_ch * 25` columns.
    Bits(BitMatrix<u32>),
    /// Real-valued weights in the layer's native shape.
    Real(FloatTensor<f32>),
}

/// A folded batchnorm-activation stage.
#[derive(Clone, Debug, PartialEq)]
pub enum BnaExport {
    /// Integer comparison: `+1` iff `a >= thresh` (`ge`) or `a <= thresh`.
    Threshold { thresh: Vec<i32>, ge: Vec<bool> },
    /// `scale * a + shift`, then `sign` (binarized on real input) or ReLU.
    Affine { scale: Vec<f32>, shift: Vec<f32>, sign: bool },
}

/// Everything the run-time generator needs, in hardware-friendly form.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportBundle {
    pub scenario: ScenarioConfig,
    pub arch: Arch,
    pub fc1: Weights,
    pub bna1: BnaExport,
    pub fc2: Weights,
    pub bna1b: BnaExport,
    pub deconv1: Weights,
    pub bna2: BnaExport,
    pub deconv2: Weights,
    pub deconv2_bias: f32,
}

fn weights(binarized: bool, packed: impl FnOnce() -> BitMatrix<u64>, real: &FloatTensor<f32>) -> Weights {
    if binarized {
        Weights::Bits(packed().repack())
    } else {
        Weights::Real(real.clone())
    }
}

/// `integer_input` says whether this BNA sees integer activations at run time.
fn fold_bna(name: &str, l: &BnaLayer<f32>, integer_input: bool) -> Result<BnaExport> {
    if l.binarized && integer_input {
        let th = l.thresholds(name)?;
        Ok(BnaExport::Threshold {
            thresh: th.iter().map(|t| t.tau_b).collect(),
            ge: th.iter().map(|t| t.dir == Direction::Ge).collect(),
        })
    } else {
        let (scale, shift) = l.bn.affine();
        Ok(BnaExport::Affine {
            scale,
            shift,
            sign: l.binarized,
        })
    }
}

/// Folds every binarized BNA into integer thresholds and packs every
/// binarized weight tensor. Real-valued stages pass through as `f32`.
pub fn fold_and_binarize(g: &Generator<f32>) -> Result<ExportBundle> {
    let s = &g.scenario;
    for slot in g.clone().params_mut() {
        if let Some(i) = slot.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("{}[{i}] is not finite", slot.name)));
        }
    }
    // Which activations are integers at run time, stage by stage.
    let fc_int = s.input_as_integer && s.bfc;
    let deconv_int = s.bbna1 && s.bdeconv1;
    Ok(ExportBundle {
        scenario: s.clone(),
        arch: g.arch,
        fc1: weights(g.fc1.binarized, || g.fc1.packed_weights(), &g.fc1.weight),
        bna1: fold_bna("bna1", &g.bna1, fc_int)?,
        fc2: weights(g.fc2.binarized, || g.fc2.packed_weights(), &g.fc2.weight),
        bna1b: fold_bna("bna1b", &g.bna1b, s.bbna1 && s.bfc)?,
        deconv1: weights(g.deconv1.binarized, || g.deconv1.packed_weights(), &g.deconv1.weight),
        bna2: fold_bna("bna2", &g.bna2, deconv_int)?,
        deconv2: weights(g.deconv2.binarized, || g.deconv2.packed_weights(), &g.deconv2.weight),
        deconv2_bias: g.deconv2.bias.as_ref().expect("deconv2 has a bias")[0],
    })
}

fn run_dense(w: &Weights, x: &Activation<f32>, inputs: usize, outputs: usize) -> Result<Activation<f32>> {
    let n = x.shape()[0];
    let shape = vec![n, outputs];
    Ok(match (w, x) {
        (Weights::Bits(b), Activation::Int(xi)) => Activation::Int(Tensor::from_vec(shape, dense_int(xi.data(), n, b)?)?),
        (Weights::Bits(b), Activation::Bipolar(xi)) => {
            Activation::Int(Tensor::from_vec(shape, dense_bipolar(xi.data(), n, b)?)?)
        }
        (Weights::Bits(b), _) => {
            let w = b.unpack::<f32>();
            Activation::Real(Tensor::from_vec(shape, dense_real(x.to_real().data(), n, inputs, w.data(), outputs))?)
        }
        (Weights::Real(w), _) => {
            Activation::Real(Tensor::from_vec(shape, dense_real(x.to_real().data(), n, inputs, w.data(), outputs))?)
        }
    })
}

fn run_deconv(w: &Weights, x: &Activation<f32>, in_ch: usize, out_ch: usize) -> Result<Activation<f32>> {
    let (n, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let geom = ConvGeom::for_deconv(out_ch, h, wd);
    let shape = vec![n, out_ch, geom.h, geom.w];
    Ok(match (w, x.as_int()) {
        (Weights::Bits(b), Some(xi)) => Activation::Int(Tensor::from_vec(shape, deconv_int(xi.data(), n, in_ch, &geom, b))?),
        (Weights::Bits(b), None) => {
            let w = b.unpack::<f32>();
            Activation::Real(Tensor::from_vec(shape, deconv_real(x.to_real().data(), n, in_ch, &geom, w.data()))?)
        }
        (Weights::Real(w), _) => {
            Activation::Real(Tensor::from_vec(shape, deconv_real(x.to_real().data(), n, in_ch, &geom, w.data()))?)
        }
    })
}

fn run_bna(b: &BnaExport, x: &Activation<f32>) -> Result<Activation<f32>> {
    let shape = x.shape().to_vec();
    match b {
        BnaExport::Threshold { thresh, ge } => {
            let xi: &IntTensor = x
                .as_int()
                .ok_or_else(|| Error::InvalidConfig("threshold stage received real-valued input".into()))?;
            let th: Vec<Threshold> = thresh
                .iter()
                .zip(ge)
                .map(|(&t, &ge)| Threshold {
                    tau: f64::from(t),
                    tau_b: t,
                    dir: if ge { Direction::Ge } else { Direction::Le },
                })
                .collect();
            Ok(Activation::Bipolar(bna_forward_threshold(xi, &th)?))
        }
        BnaExport::Affine { scale, shift, sign } => {
            let channels = scale.len();
            let len = shape[1..].iter().product::<usize>() / channels;
            let y = channel_affine(x.to_real().data(), channels, len, scale, shift);
            if *sign {
                let s = y.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
                Ok(Activation::Bipolar(Tensor::from_vec(shape, s)?))
            } else {
                Ok(Activation::Real(Tensor::from_vec(shape, y.into_iter().map(|v| v.max(0.0)).collect())?))
            }
        }
    }
}

impl ExportBundle {
    /// The exported arithmetic, run on the host.
    pub fn forward(&self, z: &FloatTensor<f32>, y: &FloatTensor<f32>) -> Result<Trace<f32>> {
        let a = &self.arch;
        let mut stages = Vec::with_capacity(8);
        let mut push = |name, value: Activation<f32>| {
            stages.push(Stage { name, value: value.clone() });
            value
        };
        let x = push("input", encode_input(&self.scenario, a, z, y)?);
        let n = x.shape()[0];
        let x = push("fc1", run_dense(&self.fc1, &x, a.z_dim + a.classes, a.fc_units)?);
        let x = push("bna1", run_bna(&self.bna1, &x)?);
        let x = push("fc2", run_dense(&self.fc2, &x, a.fc_units, a.proj_len())?);
        let x = push("bna1b", run_bna(&self.bna1b, &x)?);
        let x = x.reshape(vec![n, a.proj_channels, a.proj_size, a.proj_size])?;
        let x = push("deconv1", run_deconv(&self.deconv1, &x, a.proj_channels, a.deconv_channels)?);
        let x = push("bna2", run_bna(&self.bna2, &x)?);
        let x = push("deconv2", run_deconv(&self.deconv2, &x, a.deconv_channels, 1)?);
        let bias = self.deconv2_bias;
        let image = x.to_real().map(|&v| (v + bias).tanh());
        Ok(Trace { stages, image })
    }

    /// Names of stages whose weights are bit-packed.
    pub fn binarized_stages(&self) -> Vec<&'static str> {
        [("fc1", &self.fc1), ("fc2", &self.fc2), ("deconv1", &self.deconv1), ("deconv2", &self.deconv2)]
            .into_iter()
            .filter(|(_, w)| matches!(w, Weights::Bits(_)))
            .map(|(n, _)| n)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        write_scenario(&mut w, &self.scenario);
        write_arch(&mut w, &self.arch);
        for (wt, bna) in [(&self.fc1, &self.bna1), (&self.fc2, &self.bna1b), (&self.deconv1, &self.bna2)] {
            write_weights(&mut w, wt);
            write_bna(&mut w, bna);
        }
        write_weights(&mut w, &self.deconv2);
        w.f32(self.deconv2_bias);
        frame(&BUNDLE_MAGIC, BUNDLE_VERSION, &w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ExportBundle> {
        let payload = unframe(bytes, &BUNDLE_MAGIC, BUNDLE_VERSION, "export bundle")?;
        let mut r = Reader::new(payload);
        let scenario = read_scenario(&mut r)?;
        let arch = read_arch(&mut r)?;
        let fc1 = read_weights(&mut r)?;
        let bna1 = read_bna(&mut r)?;
        let fc2 = read_weights(&mut r)?;
        let bna1b = read_bna(&mut r)?;
        let deconv1 = read_weights(&mut r)?;
        let bna2 = read_bna(&mut r)?;
        let deconv2 = read_weights(&mut r)?;
        let deconv2_bias = r.f32()?;
        r.finish()?;
        let b = ExportBundle {
            scenario,
            arch,
            fc1,
            bna1,
            fc2,
            bna1b,
            deconv1,
            bna2,
            deconv2,
            deconv2_bias,
        };
        b.check_shapes()?;
        Ok(b)
    }

    fn check_shapes(&self) -> Result<()> {
        let a = &self.arch;
        let kk = 25;
        let want = [
            ("fc1", &self.fc1, a.fc_units, a.z_dim + a.classes, vec![a.fc_units, a.z_dim + a.classes]),
            ("fc2", &self.fc2, a.proj_len(), a.fc_units, vec![a.proj_len(), a.fc_units]),
            (
                "deconv1",
                &self.deconv1,
                a.proj_channels,
                a.deconv_channels * kk,
                vec![a.proj_channels, a.deconv_channels, 5, 5],
            ),
            ("deconv2", &self.deconv2, a.deconv_channels, kk, vec![a.deconv_channels, 1, 5, 5]),
        ];
        for (name, w, rows, cols, shape) in want {
            let ok = match w {
                Weights::Bits(b) => b.rows() == rows && b.cols() == cols,
                Weights::Real(t) => t.shape() == shape,
            };
            if !ok {
                return Err(Error::Format(format!("{name}: weight shape does not match the architecture")));
            }
        }
        for (name, b, c) in [("bna1", &self.bna1, a.fc_units), ("bna1b", &self.bna1b, a.proj_len()), ("bna2", &self.bna2, a.deconv_channels)] {
            let len = match b {
                BnaExport::Threshold { thresh, ge } => (thresh.len() == ge.len()).then_some(thresh.len()),
                BnaExport::Affine { scale, shift, .. } => (scale.len() == shift.len()).then_some(scale.len()),
            };
            if len != Some(c) {
                return Err(Error::Format(format!("{name}: expected {c} channels")));
            }
        }
        Ok(())
    }
}

fn write_weights(w: &mut Writer, wt: &Weights) {
    match wt {
        Weights::Bits(b) => {
            w.u8(1);
            w.u32(b.rows() as u32);
            w.u32(b.cols() as u32);
            for &word in b.words() {
                w.u32(word);
            }
        }
        Weights::Real(t) => {
            w.u8(0);
            w.f32s(t.shape(), t.data());
        }
    }
}

fn read_weights(r: &mut Reader) -> Result<Weights> {
    match r.u8()? {
        1 => {
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let count = rows
                .checked_mul(cols.div_ceil(32))
                .ok_or_else(|| Error::Format("bit matrix too large".into()))?;
            let words = (0..count).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
            Ok(Weights::Bits(BitMatrix::from_words(rows, cols, words)?))
        }
        0 => {
            let (shape, v) = r.f32s()?;
            Ok(Weights::Real(Tensor::from_vec(shape, v)?))
        }
        t => Err(Error::Format(format!("unknown weight tag {t}"))),
    }
}

fn write_bna(w: &mut Writer, b: &BnaExport) {
    match b {
        BnaExport::Threshold { thresh, ge } => {
            w.u8(1);
            w.u32(thresh.len() as u32);
            for (&t, &g) in thresh.iter().zip(ge) {
                w.i32(t);
                w.u8(u8::from(g));
            }
        }
        BnaExport::Affine { scale, shift, sign } => {
            w.u8(0);
            w.u8(u8::from(*sign));
            w.f32s(&[scale.len()], scale);
            w.f32s(&[shift.len()], shift);
        }
    }
}

fn read_bna(r: &mut Reader) -> Result<BnaExport> {
    match r.u8()? {
        1 => {
            let n = r.u32()? as usize;
            let mut thresh = Vec::new();
            let mut ge = Vec::new();
            for _ in 0..n {
                thresh.push(r.i32()?);
                ge.push(r.u8()? != 0);
            }
            Ok(BnaExport::Threshold { thresh, ge })
        }
        0 => {
            let sign = r.u8()? != 0;
            let scale = r.f32s()?.1;
            let shift = r.f32s()?.1;
            Ok(BnaExport::Affine { scale, shift, sign })
        }
        t => Err(Error::Format(format!("unknown BNA tag {t}"))),
    }
}

/// Outcome of running the same probes through the model and the bundle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub probes: usize,
    /// Largest absolute difference between the two final images.
    pub max_image_diff: f64,
    /// Stages whose activations are integers in the model's run-time path.
    pub integer_stages: Vec<String>,
    /// Integer stages where the bundle disagreed on at least one probe.
    pub mismatched_stages: Vec<String>,
}

impl VerifyReport {
    pub fn integer_stages_match(&self) -> bool {
        self.mismatched_stages.is_empty()
    }

    pub fn passes(&self, image_tolerance: f64) -> bool {
        self.integer_stages_match() && self.max_image_diff <= image_tolerance
    }

    pub fn summary(&self) -> String {
        if self.probes == 0 {
            return "probes: 0 (nothing compared)".to_string();
        }
        let integer = if self.integer_stages_match() {
            "integer stages: exact match".to_string()
        } else {
            format!("integer stages: MISMATCH in {}", self.mismatched_stages.join(", "))
        };
        let stages = if self.integer_stages.is_empty() {
            "none".to_string()
        } else {
            self.integer_stages.join(", ")
        };
        format!(
            "probes: {}\n{integer}\ninteger-valued stages: {stages}\nmax image difference: {:e}",
            self.probes, self.max_image_diff
        )
    }
}

/// Runs `n_probes` random `(z, y)` through the model (eval mode) and the
/// bundle and compares every integer stage exactly.
pub fn verify_export(bundle: &ExportBundle, model: &Generator<f32>, n_probes: usize, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport {
        probes: n_probes,
        ..VerifyReport::default()
    };
    if n_probes == 0 {
        return Ok(report);
    }
    let a = model.arch;
    let mut rng = Rng::new(seed);
    let mut done = 0;
    while done < n_probes {
        let n = (n_probes - done).min(16);
        let z = uniform(&mut rng, &[n, a.z_dim], -1.0, 1.0)?;
        let labels: Vec<u8> = (0..n).map(|_| rng.below(a.classes) as u8).collect();
        let y = crate::dataio::one_hot(&labels, a.classes)?;
        let want = model.forward_trace(&z, &y)?;
        let got = bundle.forward(&z, &y)?;
        for (m, b) in want.stages.iter().zip(&got.stages) {
            if !m.value.is_integer() {
                continue;
            }
            if !report.integer_stages.iter().any(|s| s == m.name) {
                report.integer_stages.push(m.name.to_string());
            }
            if m.value.as_int() != b.value.as_int() && !report.mismatched_stages.iter().any(|s| s == m.name) {
                report.mismatched_stages.push(m.name.to_string());
            }
        }
        for (&x, &y) in want.image.data().iter().zip(got.image.data()) {
            let d = (f64::from(x) - f64::from(y)).abs();
            if d.is_nan() || d > report.max_image_diff {
                report.max_image_diff = if d.is_nan() { f64::INFINITY } else { d };
            }
        }
        done += n;
    }
    Ok(report)
}
