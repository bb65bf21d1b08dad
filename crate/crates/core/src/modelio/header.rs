//! C header emission for an [`ExportBundle`].

use std::fmt::Write as _;
use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{PathContext, Result};
use crate::modelio::export::{BnaExport, ExportBundle, Weights};

pub const HEADER_GUARD: &str = "B_DCGAN_PARAMS_H";

const WORDS_PER_LINE: usize = 8;
const VALUES_PER_LINE: usize = 8;

/// Content digest of the bundle; stands in for a timestamp.
pub fn build_id(bundle: &ExportBundle) -> String {
    hex::encode(&Sha256::digest(bundle.to_bytes())[..8])
}

/// One emitted C array.
struct Array {
    name: String,
    ctype: &'static str,
    dims: Vec<usize>,
    note: String,
    body: Vec<String>,
    per_line: usize,
}

fn float(v: f32) -> String {
    format!("{v:?}f")
}

fn arrays(b: &ExportBundle) -> Vec<Array> {
    let mut out = Vec::new();
    let mut weights = |name: &str, w: &Weights| match w {
        Weights::Bits(m) => out.push(Array {
            name: format!("{name}_w_bits"),
            ctype: "uint32_t",
            dims: vec![m.rows(), m.words_per_row()],
            note: format!("{}x{} signs, bit=1 is +1, LSB-first", m.rows(), m.cols()),
            body: m.words().iter().map(|w| format!("0x{w:08x}")).collect(),
            per_line: WORDS_PER_LINE,
        }),
        Weights::Real(t) => out.push(Array {
            name: format!("{name}_w"),
            ctype: "float",
            dims: vec![t.len()],
            note: format!("shape {:?}", t.shape()),
            body: t.data().iter().map(|&v| float(v)).collect(),
            per_line: VALUES_PER_LINE,
        }),
    };
    let stages = [
        ("fc1", &b.fc1, "bna1", &b.bna1),
        ("fc2", &b.fc2, "bna1b", &b.bna1b),
        ("deconv1", &b.deconv1, "bna2", &b.bna2),
    ];
    let mut bnas = Vec::new();
    for (wname, w, bname, bna) in stages {
        weights(wname, w);
        bnas.push((bname, bna));
    }
    weights("deconv2", &b.deconv2);
    for (name, bna) in bnas {
        match bna {
            BnaExport::Threshold { thresh, ge } => {
                out.push(Array {
                    name: format!("{name}_thresh"),
                    ctype: "int32_t",
                    dims: vec![thresh.len()],
                    note: "integer thresholds".into(),
                    body: thresh.iter().map(|t| t.to_string()).collect(),
                    per_line: VALUES_PER_LINE,
                });
                out.push(Array {
                    name: format!("{name}_dir"),
                    ctype: "uint8_t",
                    dims: vec![ge.len()],
                    note: "1: out = +1 iff a >= thresh; 0: out = +1 iff a <= thresh".into(),
                    body: ge.iter().map(|&g| u8::from(g).to_string()).collect(),
                    per_line: 32,
                });
            }
            BnaExport::Affine { scale, shift, sign } => {
                let act = if *sign { "sign" } else { "relu" };
                for (param, v) in [("scale", scale), ("shift", shift)] {
                    out.push(Array {
                        name: format!("{name}_{param}"),
                        ctype: "float",
                        dims: vec![v.len()],
                        note: format!("out = {act}(scale * a + shift)"),
                        body: v.iter().map(|&x| float(x)).collect(),
                        per_line: VALUES_PER_LINE,
                    });
                }
            }
        }
    }
    out.push(Array {
        name: "deconv2_b".into(),
        ctype: "float",
        dims: vec![1],
        note: "added before tanh".into(),
        body: vec![float(b.deconv2_bias)],
        per_line: 1,
    });
    out
}

/// The header text. A pure function of the bundle.
pub fn render_header(b: &ExportBundle) -> String {
    let s = &b.scenario;
    let a = &b.arch;
    let mut h = String::new();
    let yn = |f: bool| if f { 'Y' } else { 'n' };
    let _ = writeln!(h, "/* B-DCGAN generator parameters.");
    let _ = writeln!(h, " *");
    let _ = writeln!(h, " * build id: {}", build_id(b));
    let _ = writeln!(
        h,
        " * scenario: {} (A = {})",
        s.name,
        s.a_value.map_or_else(|| "-".to_string(), |v| v.to_string())
    );
    let _ = writeln!(
        h,
        " * integer input {}, B-FC {}, B-BNA-1 {}, B-Deconv-1 {}, B-BNA-2 {}, B-Deconv-2 {}",
        yn(s.input_as_integer),
        yn(s.bfc),
        yn(s.bbna1),
        yn(s.bdeconv1),
        yn(s.bbna2),
        yn(s.bdeconv2)
    );
    let size = a.image_size();
    let _ = writeln!(
        h,
        " * z {} + classes {} -> fc1 {} -> fc2 {}x{}x{} -> deconv1 {} -> deconv2 1x{size}x{size}",
        a.z_dim, a.classes, a.fc_units, a.proj_channels, a.proj_size, a.proj_size, a.deconv_channels
    );
    let _ = writeln!(h, " *");
    let _ = writeln!(h, " * Packed weights are row-major 32-bit words, LSB-first: column c of");
    let _ = writeln!(h, " * a row lives in word c / 32, bit c % 32. Padding bits are zero.");
    let _ = writeln!(h, " * Deconvolution rows are input channels; column = out * 25 + ky * 5 + kx.");
    let _ = writeln!(h, " */");
    let _ = writeln!(h, "#ifndef {HEADER_GUARD}");
    let _ = writeln!(h, "#define {HEADER_GUARD}");
    let _ = writeln!(h);
    let _ = writeln!(h, "#include <stdint.h>");
    let _ = writeln!(h);
    for (k, v) in [
        ("Z_DIM", a.z_dim),
        ("CLASSES", a.classes),
        ("FC_UNITS", a.fc_units),
        ("PROJ_CHANNELS", a.proj_channels),
        ("PROJ_SIZE", a.proj_size),
        ("DECONV_CHANNELS", a.deconv_channels),
        ("IMAGE_SIZE", size),
    ] {
        let _ = writeln!(h, "#define BDCGAN_{k} {v}");
    }
    let _ = writeln!(h, "#define BDCGAN_A_VALUE {}", s.a_value.unwrap_or(0));
    for arr in arrays(b) {
        let dims: String = arr.dims.iter().map(|d| format!("[{d}]")).collect();
        let _ = writeln!(h);
        let _ = writeln!(h, "/* {}: {} */", arr.name, arr.note);
        let _ = writeln!(h, "static const {} {}{} = {{", arr.ctype, arr.name, dims);
        // Multi-dimensional arrays are written flat; C accepts brace elision.
        for line in arr.body.chunks(arr.per_line) {
            let _ = writeln!(h, "    {},", line.join(", "));
        }
        let _ = writeln!(h, "}};");
    }
    let _ = writeln!(h);
    let _ = writeln!(h, "#endif /* {HEADER_GUARD} */");
    h
}

pub fn emit_header(b: &ExportBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_header(b)).with_path(path)
}

/// JSON description of the emitted arrays: names, C types, shapes and a
/// SHA-256 of each array's text.
pub fn manifest(b: &ExportBundle) -> serde_json::Value {
    let arrays: Vec<_> = arrays(b)
        .into_iter()
        .map(|a| {
            let digest = hex::encode(Sha256::digest(a.body.join(",").as_bytes()));
            json!({ "name": a.name, "ctype": a.ctype, "dims": a.dims, "sha256": digest })
        })
        .collect();
    json!({
        "build_id": build_id(b),
        "guard": HEADER_GUARD,
        "scenario": b.scenario,
        "arch": b.arch,
        "arrays": arrays,
    })
}
