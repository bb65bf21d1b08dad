//! Generator persistence and the export compiler (threshold folding, bit
//! packing, C header emission).

mod codec;
mod export;
mod header;

use std::path::Path;

pub use export::{fold_and_binarize, verify_export, BnaExport, ExportBundle, VerifyReport, Weights, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use header::{build_id, emit_header, manifest, render_header, HEADER_GUARD};

use crate::error::{Error, PathContext, Result};
use crate::layers::{build_generator, Arch, BnaLayer, DeconvLayer, FcLayer, Generator, ScenarioConfig};
use crate::tensor::Rng;
use codec::{frame, unframe, Reader, Writer};

pub const MODEL_MAGIC: [u8; 4] = *b"BDCG";
pub const MODEL_VERSION: u32 = 1;

const TAG_FC: u8 = 1;
const TAG_BNA: u8 = 2;
const TAG_DECONV: u8 = 3;

pub(crate) fn write_scenario(w: &mut Writer, s: &ScenarioConfig) {
    w.str(&s.name);
    let flags = [s.input_as_integer, s.bfc, s.bbna1, s.bdeconv1, s.bbna2, s.bdeconv2];
    w.u8(flags.iter().enumerate().fold(0, |acc, (i, &f)| acc | (u8::from(f) << i)));
    w.i32(s.a_value.unwrap_or(0));
}

pub(crate) fn read_scenario(r: &mut Reader) -> Result<ScenarioConfig> {
    let name = r.str()?;
    let flags = r.u8()?;
    let a = r.i32()?;
    let bit = |i: u8| flags & (1 << i) != 0;
    let s = ScenarioConfig {
        name,
        input_as_integer: bit(0),
        a_value: (a != 0).then_some(a),
        bfc: bit(1),
        bbna1: bit(2),
        bdeconv1: bit(3),
        bbna2: bit(4),
        bdeconv2: bit(5),
    };
    s.validate()?;
    Ok(s)
}

pub(crate) fn write_arch(w: &mut Writer, a: &Arch) {
    for v in [
        a.z_dim,
        a.classes,
        a.fc_units,
        a.proj_channels,
        a.proj_size,
        a.deconv_channels,
        a.disc_channels.0,
        a.disc_channels.1,
    ] {
        w.u32(v as u32);
    }
}

pub(crate) fn read_arch(r: &mut Reader) -> Result<Arch> {
    let mut v = [0usize; 8];
    for x in &mut v {
        *x = r.u32()? as usize;
    }
    let a = Arch {
        z_dim: v[0],
        classes: v[1],
        fc_units: v[2],
        proj_channels: v[3],
        proj_size: v[4],
        deconv_channels: v[5],
        disc_channels: (v[6], v[7]),
    };
    a.validate()?;
    Ok(a)
}

fn write_optional(w: &mut Writer, bias: &Option<Vec<f32>>) {
    match bias {
        Some(b) => {
            w.u8(1);
            w.f32s(&[b.len()], b);
        }
        None => w.u8(0),
    }
}

/// Serializes the generator (scenario, sizes, master weights, BN parameters
/// and running statistics).
pub fn to_bytes(g: &Generator<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    write_scenario(&mut w, &g.scenario);
    write_arch(&mut w, &g.arch);
    w.u32(7);
    let fc = |w: &mut Writer, name: &str, l: &FcLayer<f32>| {
        w.u8(TAG_FC);
        w.str(name);
        w.u8(u8::from(l.binarized));
        w.f32s(l.weight.shape(), l.weight.data());
        write_optional(w, &l.bias);
    };
    let bna = |w: &mut Writer, name: &str, l: &BnaLayer<f32>| {
        w.u8(TAG_BNA);
        w.str(name);
        w.u8(u8::from(l.binarized));
        for v in [&l.bn.gamma, &l.bn.beta, &l.bn.running_mean, &l.bn.running_var] {
            w.f32s(&[v.len()], v);
        }
    };
    let deconv = |w: &mut Writer, name: &str, l: &DeconvLayer<f32>| {
        w.u8(TAG_DECONV);
        w.str(name);
        w.u8(u8::from(l.binarized));
        w.f32s(l.weight.shape(), l.weight.data());
        write_optional(w, &l.bias);
    };
    fc(&mut w, "fc1", &g.fc1);
    bna(&mut w, "bna1", &g.bna1);
    fc(&mut w, "fc2", &g.fc2);
    bna(&mut w, "bna1b", &g.bna1b);
    deconv(&mut w, "deconv1", &g.deconv1);
    bna(&mut w, "bna2", &g.bna2);
    deconv(&mut w, "deconv2", &g.deconv2);
    frame(&MODEL_MAGIC, MODEL_VERSION, &w.buf)
}

struct RecordReader<'r, 'a> {
    r: &'r mut Reader<'a>,
}

impl RecordReader<'_, '_> {
    fn header(&mut self, tag: u8, name: &str, binarized: bool) -> Result<()> {
        let (t, n, b) = (self.r.u8()?, self.r.str()?, self.r.u8()?);
        if t != tag || n != name || b != u8::from(binarized) {
            return Err(Error::Format(format!(
                "expected record {name} (tag {tag}, binarized {binarized}), found {n} (tag {t}, binarized {b})"
            )));
        }
        Ok(())
    }

    fn array_into(&mut self, name: &str, dst: &mut [f32], shape: &[usize]) -> Result<()> {
        let (s, v) = self.r.f32s()?;
        if s != shape {
            return Err(Error::Format(format!("{name}: shape {s:?}, expected {shape:?}")));
        }
        dst.copy_from_slice(&v);
        Ok(())
    }

    fn optional_into(&mut self, name: &str, dst: &mut Option<Vec<f32>>) -> Result<()> {
        let present = self.r.u8()? == 1;
        match dst {
            Some(b) if present => {
                let len = b.len();
                self.array_into(name, b, &[len])
            }
            None if !present => Ok(()),
            _ => Err(Error::Format(format!("{name}: unexpected bias presence"))),
        }
    }

    fn fc(&mut self, name: &str, l: &mut FcLayer<f32>) -> Result<()> {
        self.header(TAG_FC, name, l.binarized)?;
        let shape = l.weight.shape().to_vec();
        self.array_into(name, l.weight.data_mut(), &shape)?;
        self.optional_into(name, &mut l.bias)
    }

    fn bna(&mut self, name: &str, l: &mut BnaLayer<f32>) -> Result<()> {
        self.header(TAG_BNA, name, l.binarized)?;
        let c = l.channels();
        for v in [&mut l.bn.gamma, &mut l.bn.beta, &mut l.bn.running_mean, &mut l.bn.running_var] {
            self.array_into(name, v, &[c])?;
        }
        Ok(())
    }

    fn deconv(&mut self, name: &str, l: &mut DeconvLayer<f32>) -> Result<()> {
        self.header(TAG_DECONV, name, l.binarized)?;
        let shape = l.weight.shape().to_vec();
        self.array_into(name, l.weight.data_mut(), &shape)?;
        self.optional_into(name, &mut l.bias)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Generator<f32>> {
    let payload = unframe(bytes, &MODEL_MAGIC, MODEL_VERSION, "model file")?;
    let mut r = Reader::new(payload);
    let scenario = read_scenario(&mut r)?;
    let arch = read_arch(&mut r)?;
    let records = r.u32()?;
    if records != 7 {
        return Err(Error::Format(format!("{records} layer records, expected 7")));
    }
    // Shapes come from `arch`; the values are all overwritten below.
    let mut g = build_generator::<f32>(&scenario, arch, &mut Rng::new(0))?;
    let mut rr = RecordReader { r: &mut r };
    rr.fc("fc1", &mut g.fc1)?;
    rr.bna("bna1", &mut g.bna1)?;
    rr.fc("fc2", &mut g.fc2)?;
    rr.bna("bna1b", &mut g.bna1b)?;
    rr.deconv("deconv1", &mut g.deconv1)?;
    rr.bna("bna2", &mut g.bna2)?;
    rr.deconv("deconv2", &mut g.deconv2)?;
    r.finish()?;
    Ok(g)
}

pub fn save(g: &Generator<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(g)).with_path(path)
}

pub fn load(path: impl AsRef<Path>) -> Result<Generator<f32>> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).with_path(path)?)
}

/// Bitwise parameter equality (distinguishes `-0.0` from `0.0` and compares
/// NaN payloads).
pub fn bit_identical(a: &Generator<f32>, b: &Generator<f32>) -> bool {
    to_bytes(a) == to_bytes(b)
}

/// A generator with every parameter drawn at random, for fuzzing.
pub fn random_generator(scenario: &ScenarioConfig, arch: Arch, rng: &mut Rng) -> Result<Generator<f32>> {
    let mut g = build_generator::<f32>(scenario, arch, rng)?;
    for slot in g.params_mut() {
        for v in slot.values.iter_mut() {
            *v = rng.uniform_scalar(-1.5, 1.5) as f32;
        }
    }
    for l in [&mut g.bna1, &mut g.bna1b, &mut g.bna2] {
        for (m, v) in l.bn.running_mean.iter_mut().zip(l.bn.running_var.iter_mut()) {
            *m = rng.uniform_scalar(-3.0, 3.0) as f32;
            *v = rng.uniform_scalar(0.05, 4.0) as f32;
        }
        for gm in &mut l.bn.gamma {
            if gm.abs() < 1e-3 {
                *gm = 0.5;
            }
        }
    }
    Ok(g)
}
