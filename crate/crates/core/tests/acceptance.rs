//! Acceptance criteria. Runs as a plain binary (`harness = false`) so every
//! criterion prints exactly one PASS/FAIL line regardless of output capture.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use bdcgan_core::binkernels::{bin_dot, int_dot, pack, sign_binarize, BitWord};
use bdcgan_core::dataio::{load_mnist_dir, one_hot};
use bdcgan_core::layers::{
    build_generator, bna_fold, bna_forward_threshold, Activation, Arch, BnaLayer, Conv2d, DeconvLayer,
    Direction, Discriminator, Generator, Mode, ScenarioConfig, BN_EPS, PRESET_NAMES,
};
use bdcgan_core::modelio::{self, emit_header, fold_and_binarize, random_generator, render_header, verify_export};
use bdcgan_core::tensor::{uniform, FloatTensor, Rng, Tensor};
use bdcgan_core::training::{
    discriminator_grads, discriminator_objective, generator_grads, generator_objective, learning_rate, train,
    train_step, TrainConfig, TrainState, DEFAULT_LR, DEFAULT_LR_DECAY,
};

fn reduced_arch() -> Arch {
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

fn bipolar(rng: &mut Rng, n: usize) -> FloatTensor<f32> {
    let v = (0..n).map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 }).collect();
    Tensor::from_vec(vec![1, n], v).unwrap()
}

fn kernel_pairs<W: BitWord>(rng: &mut Rng, cases: usize) {
    for _ in 0..cases {
        let n = 1 + rng.below(256);
        let (a, w) = (bipolar(rng, n), bipolar(rng, n));
        let naive: i64 = a.data().iter().zip(w.data()).map(|(&x, &y)| (x * y) as i64).sum();
        let (pa, pw) = (pack::<f32, W>(&a).unwrap(), pack::<f32, W>(&w).unwrap());
        assert_eq!(i64::from(bin_dot(pa.row(0), pw.row(0), n).unwrap()), naive, "bin_dot, n = {n}");

        let ints: Vec<i32> = (0..n).map(|_| rng.below(8191) as i32 - 4095).collect();
        let naive: i64 = ints.iter().zip(w.data()).map(|(&x, &y)| i64::from(x) * y as i64).sum();
        assert_eq!(i64::from(int_dot(&ints, pw.row(0)).unwrap()), naive, "int_dot, n = {n}");
    }
}

fn kernel_oracle_equivalence() -> String {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    kernel_pairs::<u64>(&mut rng, 5_000);
    kernel_pairs::<u32>(&mut rng, 5_000);
    let took = start.elapsed();
    assert!(took < Duration::from_secs(10), "took {took:?}");
    format!("10000 pairs (u64 and u32 words), {took:.2?}")
}

fn threshold_folding() -> String {
    let t = bna_fold(1.0, 0.0, 1.0, -0.6).unwrap();
    assert_eq!((t.tau_b, t.dir), (1, Direction::Ge), "hand example");
    assert!((t.tau - 0.6).abs() < 1e-12);

    let mut rng = Rng::new(202);
    let channels = 10;
    let activations: Vec<i32> = (-50..=50).collect();
    let a = Tensor::from_vec(
        vec![activations.len(), channels],
        activations.iter().flat_map(|&v| std::iter::repeat_n(v, channels)).collect(),
    )
    .unwrap();
    let (mut compared, mut negative) = (0usize, 0usize);
    for _ in 0..100 {
        let mut layer = BnaLayer::<f64>::new(channels, true);
        for c in 0..channels {
            let bn = &mut layer.bn;
            loop {
                bn.gamma[c] = rng.uniform_scalar(-3.0, 3.0);
                bn.running_var[c] = rng.uniform_scalar(1e-3, 20.0);
                if (bn.gamma[c] * bn.inv_std(c)).abs() >= 1e-6 {
                    break;
                }
            }
            bn.beta[c] = rng.uniform_scalar(-3.0, 3.0);
            bn.running_mean[c] = rng.uniform_scalar(-45.0, 45.0);
            negative += usize::from(bn.gamma[c] < 0.0);
        }
        let got = bna_forward_threshold(&a, &layer.thresholds("bna").unwrap()).unwrap();

        // Independent batch-norm evaluation followed by sign.
        let bn = &layer.bn;
        let norm: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % channels;
                bn.gamma[c] * (f64::from(v) - bn.running_mean[c]) / (bn.running_var[c] + BN_EPS).sqrt() + bn.beta[c]
            })
            .collect();
        let want = sign_binarize(&Tensor::from_vec(a.shape().to_vec(), norm).unwrap());
        for (i, (&g, &w)) in got.data().iter().zip(want.data()).enumerate() {
            let c = i % channels;
            let tau = bn.running_mean[c] - bn.beta[c] * (bn.running_var[c] + BN_EPS).sqrt() / bn.gamma[c];
            if (f64::from(a.data()[i]) - tau).abs() >= 0.5 {
                assert_eq!(f64::from(g), w, "a = {}, gamma = {}, tau = {tau}", a.data()[i], bn.gamma[c]);
                compared += 1;
            }
        }
    }
    assert!(negative > 100);
    format!("1000 neurons ({negative} with negative scale), {compared} activations compared")
}

/// Scenario flag table, kept verbatim (Y = binarized / integer).
const SETUP_TABLE: &str = "
                    & S0 & S1-1 & S1-2 & S2-1 & S2-2 & S3-1 & S3-2
Input as integer    & n  & Y    & Y    & Y    & Y    & Y    & Y
A value             & -  & 1    & 1    & 127  & 4095 & 1    & 1
B-FC                & n  & Y    & Y    & Y    & Y    & Y    & Y
B-BNA-1             & n  & n    & Y    & Y    & Y    & Y    & Y
B-Deconv-1          & n  & n    & n    & n    & n    & Y    & Y
B-BNA-2             & n  & n    & n    & n    & n    & Y    & Y
B-Deconv-2          & n  & n    & n    & n    & n    & n    & Y
";

fn setup_table_fidelity() -> String {
    let rows: Vec<Vec<&str>> = SETUP_TABLE
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('&').map(str::trim).collect())
        .collect();
    let names = &rows[0][1..];
    assert_eq!(names, PRESET_NAMES);
    let flag = |row: usize, col: usize| match rows[row][col + 1] {
        "Y" => true,
        "n" => false,
        other => panic!("bad cell {other}"),
    };
    for (col, &name) in names.iter().enumerate() {
        let g: Generator<f32> =
            build_generator(&ScenarioConfig::preset(name).unwrap(), reduced_arch(), &mut Rng::new(0)).unwrap();
        let s = &g.scenario;
        let a = match rows[2][col + 1] {
            "-" => None,
            v => Some(v.parse::<i32>().unwrap()),
        };
        assert_eq!(s.name, name);
        assert_eq!(s.input_as_integer, flag(1, col), "{name}");
        assert_eq!(s.a_value, a, "{name}");
        let layers = [
            (flag(3, col), g.fc1.binarized && g.fc2.binarized, g.fc1.binarized || g.fc2.binarized),
            (flag(4, col), g.bna1.binarized && g.bna1b.binarized, g.bna1.binarized || g.bna1b.binarized),
            (flag(5, col), g.deconv1.binarized, g.deconv1.binarized),
            (flag(6, col), g.bna2.binarized, g.bna2.binarized),
            (flag(7, col), g.deconv2.binarized, g.deconv2.binarized),
        ];
        for (row, (want, all, any)) in layers.into_iter().enumerate() {
            assert_eq!((all, any), (want, want), "{name} {}", rows[row + 3][0]);
        }
        assert_eq!(
            [s.bfc, s.bbna1, s.bdeconv1, s.bbna2, s.bdeconv2],
            [flag(3, col), flag(4, col), flag(5, col), flag(6, col), flag(7, col)]
        );
    }
    assert_eq!(ScenarioConfig::preset("S2-1").unwrap().a_value, Some(127));
    assert_eq!(ScenarioConfig::preset("S2-2").unwrap().a_value, Some(4095));
    "7 scenarios match the embedded table".into()
}

fn scramble(slots: Vec<bdcgan_core::layers::ParamSlot<'_, f64>>, rng: &mut Rng) {
    for slot in slots {
        for v in slot.values.iter_mut() {
            *v = rng.uniform_scalar(-0.5, 0.5);
        }
    }
}

/// Central differences for every parameter; returns how many were compared.
fn finite_difference<M: Clone>(
    label: &str,
    model: &M,
    analytic: &[Vec<f64>],
    set: impl Fn(&mut M, usize, usize, f64) -> f64,
    objective: impl Fn(&M) -> f64,
    worst: &mut (f64, String),
) -> usize {
    const H: f64 = 1e-4;
    let mut m = model.clone();
    let mut n = 0;
    for (s, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let base = set(&mut m, s, i, 0.0);
            set(&mut m, s, i, base + H);
            let up = objective(&m);
            set(&mut m, s, i, base - H);
            let down = objective(&m);
            set(&mut m, s, i, base);
            let numeric = (up - down) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                *worst = (rel, format!("{label} slot {s} [{i}]: analytic {a:e}, numeric {numeric:e}"));
            }
            n += 1;
        }
    }
    n
}

fn gradient_check() -> String {
    let start = Instant::now();
    let arch = reduced_arch();
    assert_eq!(arch.image_size(), 8);
    let mut rng = Rng::new(404);
    let mut g: Generator<f64> = build_generator(&ScenarioConfig::preset("S0").unwrap(), arch, &mut rng).unwrap();
    let mut d: Discriminator<f64> = Discriminator::new(&arch, &mut rng).unwrap();
    scramble(g.params_mut(), &mut rng);
    scramble(d.params_mut(), &mut rng);

    let batch = 2;
    let z: FloatTensor<f64> = uniform(&mut rng, &[batch, arch.z_dim], -1.0, 1.0).unwrap();
    let y: FloatTensor<f64> = one_hot(&[0, 2], arch.classes).unwrap();
    let real: FloatTensor<f64> = uniform(&mut rng, &[batch, 1, 8, 8], -1.0, 1.0).unwrap();
    let y_real: FloatTensor<f64> = one_hot(&[1, 2], arch.classes).unwrap();
    let mut worst = (0.0, String::new());

    let (fake, cache) = g.forward_train(&z, &y).unwrap();
    let (_, ggrads) = generator_grads(&g, &d, &cache, &fake, &y).unwrap();
    assert_eq!(ggrads.tensors.len(), g.params_mut().len());
    let mut n = finite_difference(
        "generator",
        &g,
        &ggrads.tensors,
        |m: &mut Generator<f64>, s, i, v| std::mem::replace(&mut m.params_mut()[s].values[i], v),
        |m| generator_objective(m, &d, &z, &y).unwrap(),
        &mut worst,
    );
    let (_, dgrads) = discriminator_grads(&d, &real, &y_real, &fake, &y).unwrap();
    assert_eq!(dgrads.tensors.len(), d.params_mut().len());
    n += finite_difference(
        "discriminator",
        &d,
        &dgrads.tensors,
        |m: &mut Discriminator<f64>, s, i, v| std::mem::replace(&mut m.params_mut()[s].values[i], v),
        |m| discriminator_objective(m, &real, &y_real, &fake, &y).unwrap(),
        &mut worst,
    );
    let took = start.elapsed();
    assert!(worst.0 <= 1e-3, "worst relative error {:e} at {}", worst.0, worst.1);
    assert!(took < Duration::from_secs(60), "took {took:?}");
    format!("{n} parameters, worst relative error {:.1e}, {took:.2?}", worst.0)
}

fn lr_schedule() -> String {
    for t in [0u64, 1, 100, 1500, 2999, 3000, 3001, 10_000] {
        let want = (1e-4 - t as f64 * (1e-4 / 3000.0)).max(0.0);
        assert_eq!(learning_rate(DEFAULT_LR, DEFAULT_LR_DECAY, t), want, "t = {t}");
    }
    assert_eq!(learning_rate(DEFAULT_LR, DEFAULT_LR_DECAY, 3000), 0.0);
    assert!(learning_rate(DEFAULT_LR, DEFAULT_LR_DECAY, 2999) > 0.0);

    // Train a reduced model through the full schedule and past its end.
    let mut cfg = TrainConfig::new(ScenarioConfig::preset("S3-1").unwrap());
    cfg.arch = reduced_arch();
    cfg.batch_size = 2;
    cfg.seed = 505;
    let mut state = TrainState::new(cfg).unwrap();
    let mut rng = Rng::new(506);
    let images: FloatTensor<f32> = uniform(&mut rng, &[2, 1, 8, 8], -1.0, 1.0).unwrap();
    let labels: FloatTensor<f32> = one_hot(&[0, 1], 3).unwrap();
    let initial = state.generator.clone();
    while state.iteration < 3000 {
        train_step(&mut state, &images, &labels).unwrap();
    }
    assert!(!modelio::bit_identical(&initial, &state.generator), "model never trained");
    let (g, d) = (state.generator.clone(), state.discriminator.clone());
    for _ in 0..20 {
        train_step(&mut state, &images, &labels).unwrap();
    }
    assert!(modelio::bit_identical(&g, &state.generator), "generator changed after lr reached 0");
    assert!(d == state.discriminator, "discriminator changed after lr reached 0");
    assert!(state.history[3000..].iter().all(|r| r.lr == 0.0));
    "lr(3000) = 0; 20 steps past the schedule leave G and D bit-identical".into()
}

fn smoke_training() -> String {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mnist-1k");
    let data = load_mnist_dir(&fixture).unwrap();
    assert_eq!(data.len(), 1000);
    let mut cfg = TrainConfig::new(ScenarioConfig::preset("S3-1").unwrap());
    cfg.max_iterations = 200;
    cfg.seed = 606;
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let run = train(cfg, &data, dir.path(), |_| {}).unwrap();
    let took = start.elapsed();
    let h = &run.state.history;
    assert_eq!(h.len(), 200);
    assert!(h.iter().all(|r| r.d_loss.is_finite() && r.g_loss.is_finite()), "non-finite loss");

    let mut rng = Rng::new(607);
    let z: FloatTensor<f32> = uniform(&mut rng, &[128, 100], -1.0, 1.0).unwrap();
    let labels: Vec<u8> = (0..128).map(|i| (i % 10) as u8).collect();
    let out = run.state.generator.forward(&z, &one_hot(&labels, 10).unwrap(), Mode::Eval).unwrap();
    let mean = out.data().iter().map(|&v| f64::from(v)).sum::<f64>() / out.len() as f64;
    let std = (out.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / out.len() as f64).sqrt();
    assert!(std > 0.01, "output std {std}");
    assert!(took < Duration::from_secs(600), "took {took:?}");
    let last = h.last().unwrap();
    format!(
        "200 iterations in {took:.1?}, final d_loss {:.3} g_loss {:.3}, output std {std:.3}",
        last.d_loss, last.g_loss
    )
}

fn random_scenario(rng: &mut Rng) -> ScenarioConfig {
    let mut flag = || rng.below(2) == 1;
    let (int, fc, b1, d1, b2, d2) = (flag(), flag(), flag(), flag(), flag(), flag());
    ScenarioConfig {
        name: "fuzz".into(),
        input_as_integer: int,
        a_value: int.then(|| [1, 127, 4095][rng.below(3)]),
        bfc: fc,
        bbna1: b1,
        bdeconv1: d1,
        bbna2: b2,
        bdeconv2: d2,
    }
}

fn export_round_trip() -> String {
    let mut rng = Rng::new(707);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bdcg");
    for case in 0..1000 {
        let s = if case % 2 == 0 {
            ScenarioConfig::preset(PRESET_NAMES[case / 2 % 7]).unwrap()
        } else {
            random_scenario(&mut rng)
        };
        let g = random_generator(&s, reduced_arch(), &mut rng).unwrap();
        modelio::save(&g, &path).unwrap();
        let back = modelio::load(&path).unwrap();
        assert!(modelio::bit_identical(&g, &back), "case {case}");
        assert_eq!(std::fs::read(&path).unwrap(), modelio::to_bytes(&back), "case {case}");
    }

    let mut worst = 0.0f64;
    for name in PRESET_NAMES {
        let g = random_generator(&ScenarioConfig::preset(name).unwrap(), Arch::default(), &mut rng).unwrap();
        let bundle = fold_and_binarize(&g).unwrap();
        let report = verify_export(&bundle, &g, 64, 708).unwrap();
        assert_eq!(report.probes, 64);
        assert!(report.integer_stages_match(), "{name}: {}", report.summary());
        assert!(report.max_image_diff <= 1e-5, "{name}: {}", report.summary());
        worst = worst.max(report.max_image_diff);

        let text = render_header(&bundle);
        assert_eq!(text, render_header(&fold_and_binarize(&g.clone()).unwrap()), "{name}");
        let (a, b) = (dir.path().join("a.h"), dir.path().join("b.h"));
        emit_header(&bundle, &a).unwrap();
        emit_header(&fold_and_binarize(&modelio::from_bytes(&modelio::to_bytes(&g)).unwrap()).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{name}");
    }
    format!("1000 save/load cases; 7 scenarios x 64 probes, max image diff {worst:e}; headers byte-identical")
}

fn integer_purity() -> String {
    let mut rng = Rng::new(808);
    let g = random_generator(&ScenarioConfig::preset("S3-1").unwrap(), Arch::default(), &mut rng).unwrap();
    let z: FloatTensor<f32> = uniform(&mut rng, &[16, 100], -1.0, 1.0).unwrap();
    let y = one_hot(&(0..16).map(|i| (i % 10) as u8).collect::<Vec<_>>(), 10).unwrap();
    let bits = |t: &FloatTensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let first = g.forward(&z, &y, Mode::Eval).unwrap();
    for _ in 0..3 {
        assert_eq!(bits(&first), bits(&g.forward(&z, &y, Mode::Eval).unwrap()));
    }
    let trace = g.forward_trace(&z, &y).unwrap();
    let names: Vec<&str> = trace.stages.iter().map(|s| s.name).collect();
    assert_eq!(names, ["input", "fc1", "bna1", "fc2", "bna1b", "deconv1", "bna2", "deconv2"]);
    for stage in &trace.stages[..7] {
        assert!(stage.value.is_integer(), "{} is not integer", stage.name);
    }
    for name in ["bna1", "bna1b", "bna2"] {
        assert!(matches!(trace.stage(name), Some(Activation::Bipolar(_))), "{name}");
    }
    assert!(!trace.stages[7].value.is_integer());
    assert_eq!(bits(&first), bits(&trace.image));

    let bundle = fold_and_binarize(&g).unwrap();
    let bt = bundle.forward(&z, &y).unwrap();
    for (a, b) in trace.stages[..7].iter().zip(&bt.stages) {
        assert_eq!(a.value.as_int(), b.value.as_int(), "{}", a.name);
    }
    "eval output bit-identical across runs; input..bna2 integer, only deconv2 real".into()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct 5x5, stride 2, pad 2 convolution; weights `[co, ci, 5, 5]`.
fn naive_conv(x: &[f64], n: usize, ci: usize, h: usize, w: usize, wt: &[f64], co: usize) -> Vec<f64> {
    let (oh, ow) = ((h + 4 - 5) / 2 + 1, (w + 4 - 5) / 2 + 1);
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..5 {
                            for kx in 0..5 {
                                let (iy, ix) = ((oy * 2 + ky) as isize - 2, (ox * 2 + kx) as isize - 2);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[((o * ci + c) * 5 + ky) * 5 + kx]
                                        * x[((b * ci + c) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn deconv_adjointness() -> String {
    let mut rng = Rng::new(909);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, cin, cout) = (1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(4));
        let (h, w) = (1 + rng.below(5), 1 + rng.below(5));
        let deconv = DeconvLayer::<f64>::new(cin, cout, false, false, &mut rng, 1.0);
        // A deconv weight [cin, cout, k, k] read as a conv from cout to cin channels.
        let conv = Conv2d {
            weight: deconv.weight.clone(),
            bias: vec![0.0; cin],
        };
        let y: FloatTensor<f64> = uniform(&mut rng, &[n, cin, h, w], -1.0, 1.0).unwrap();
        let up = deconv.forward(&y).unwrap();
        let (oh, ow) = (up.shape()[2], up.shape()[3]);
        assert_eq!((oh, ow), (2 * h, 2 * w));
        let x: FloatTensor<f64> = uniform(&mut rng, &[n, cout, oh, ow], -1.0, 1.0).unwrap();
        let down = conv.forward(&x).unwrap();
        let direct = naive_conv(x.data(), n, cout, oh, ow, deconv.weight.data(), cin);
        for (a, b) in down.data().iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "conv disagrees with direct sum");
        }
        let lhs = dot(down.data(), y.data());
        let rhs = dot(x.data(), up.data());
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        assert!(rel <= 1e-5, "<conv x, y> = {lhs}, <x, deconv y> = {rhs}");
    }
    format!("100 instances, worst relative gap {worst:.1e}")
}

fn main() {
    let criteria: [(&str, fn() -> String); 9] = [
        ("kernel oracle equivalence", kernel_oracle_equivalence),
        ("threshold folding", threshold_folding),
        ("scenario table fidelity", setup_table_fidelity),
        ("gradient check (S0)", gradient_check),
        ("learning-rate schedule", lr_schedule),
        ("smoke training (S3-1)", smoke_training),
        ("export round trip", export_round_trip),
        ("integer purity (S3-1)", integer_purity),
        ("deconv adjointness", deconv_adjointness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name}: {msg}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
