//! Property tests for the cross-module invariants.

use bdcgan_core::binkernels::{sign, sign_binarize};
use bdcgan_core::dataio::{batches, one_hot, Dataset};
use bdcgan_core::layers::{
    bna_fold, bna_forward_threshold, Activation, Arch, BnaLayer, Conv2d, DeconvLayer, Direction, FcLayer, Generator,
    Mode, ScenarioConfig, BN_EPS, PRESET_NAMES,
};
use bdcgan_core::modelio::{self, fold_and_binarize, random_generator, render_header, verify_export};
use bdcgan_core::tensor::{uniform, FloatTensor, Rng, Tensor};
use bdcgan_core::training::{learning_rate, train_step, TrainConfig, TrainState};
use proptest::prelude::*;

fn small() -> Arch {
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

fn preset() -> impl Strategy<Value = ScenarioConfig> {
    prop::sample::select(PRESET_NAMES.to_vec()).prop_map(|n| ScenarioConfig::preset(n).unwrap())
}

fn any_scenario() -> impl Strategy<Value = ScenarioConfig> {
    (any::<[bool; 6]>(), prop::sample::select(vec![1, 127, 4095])).prop_map(|(f, a)| ScenarioConfig {
        name: "prop".into(),
        input_as_integer: f[0],
        a_value: f[0].then_some(a),
        bfc: f[1],
        bbna1: f[2],
        bdeconv1: f[3],
        bbna2: f[4],
        bdeconv2: f[5],
    })
}

fn probes(rng: &mut Rng, arch: &Arch, n: usize) -> (FloatTensor<f32>, FloatTensor<f32>) {
    let z = uniform(rng, &[n, arch.z_dim], -1.0, 1.0).unwrap();
    let labels: Vec<u8> = (0..n).map(|_| rng.below(arch.classes) as u8).collect();
    (z, one_hot(&labels, arch.classes).unwrap())
}

fn bits(t: &FloatTensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_is_bitwise_reproducible(seed in any::<u64>(), n in 1usize..200) {
        let a: FloatTensor<f32> = uniform(&mut Rng::new(seed), &[n], -1.0, 1.0).unwrap();
        let b: FloatTensor<f32> = uniform(&mut Rng::new(seed), &[n], -1.0, 1.0).unwrap();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn folded_threshold_matches_batchnorm_sign(
        gamma in prop_oneof![-4.0f64..-1e-3, 1e-3f64..4.0],
        var in 1e-3f64..25.0,
        mean in -40.0f64..40.0,
        beta in -4.0f64..4.0,
    ) {
        let inv = 1.0 / (var + BN_EPS).sqrt();
        let t = bna_fold(gamma, mean, inv, beta).unwrap();
        let tau = mean - beta / (gamma * inv);
        prop_assert!((t.tau - tau).abs() <= 1e-9 * (1.0 + tau.abs()));
        prop_assert_eq!(t.tau_b, tau.round() as i32);
        prop_assert_eq!(t.dir, if gamma > 0.0 { Direction::Ge } else { Direction::Le });

        let mut layer = BnaLayer::<f64>::new(1, true);
        layer.bn.gamma[0] = gamma;
        layer.bn.beta[0] = beta;
        layer.bn.running_mean[0] = mean;
        layer.bn.running_var[0] = var;
        let a = Tensor::from_vec(vec![101, 1], (-50..=50).collect()).unwrap();
        let got = bna_forward_threshold(&a, &layer.thresholds("p").unwrap()).unwrap();
        let bn = a.map(|&v| gamma * (f64::from(v) - mean) * inv + beta);
        let want = sign_binarize(&bn);
        for ((&v, &g), &w) in a.data().iter().zip(got.data()).zip(want.data()) {
            if (f64::from(v) - tau).abs() >= 0.5 {
                prop_assert_eq!(f64::from(g), w, "a = {}", v);
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_strided_conv(
        seed in any::<u64>(),
        n in 1usize..3,
        cin in 1usize..4,
        cout in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
    ) {
        let mut rng = Rng::new(seed);
        let deconv = DeconvLayer::<f64>::new(cin, cout, false, false, &mut rng, 1.0);
        let conv = Conv2d { weight: deconv.weight.clone(), bias: vec![0.0; cin] };
        let y: FloatTensor<f64> = uniform(&mut rng, &[n, cin, h, w], -1.0, 1.0).unwrap();
        let x: FloatTensor<f64> = uniform(&mut rng, &[n, cout, 2 * h, 2 * w], -1.0, 1.0).unwrap();
        let lhs: f64 = conv.forward(&x).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = deconv.forward(&y).unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-300));
    }

    #[test]
    fn binarized_forward_sees_only_weight_signs(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = Rng::new(seed);
        let fc = FcLayer::<f64>::new(7, 5, false, true, &mut rng, 0.5);
        let mut fc_scaled = fc.clone();
        fc_scaled.weight = fc.weight.map(|&v| v * scale);
        let x: FloatTensor<f64> = uniform(&mut rng, &[3, 7], -2.0, 2.0).unwrap();
        prop_assert_eq!(fc.forward(&x).unwrap(), fc_scaled.forward(&x).unwrap());

        let dc = DeconvLayer::<f64>::new(2, 3, false, true, &mut rng, 0.5);
        let mut dc_scaled = dc.clone();
        dc_scaled.weight = dc.weight.map(|&v| v * scale);
        let x: FloatTensor<f64> = uniform(&mut rng, &[2, 2, 3, 3], -2.0, 2.0).unwrap();
        prop_assert_eq!(dc.forward(&x).unwrap(), dc_scaled.forward(&x).unwrap());
    }

    #[test]
    fn lr_is_non_increasing_and_reaches_zero(lr0 in 1e-6f64..1.0, steps in 1u64..10_000) {
        let decay = lr0 / steps as f64;
        for t in 0..steps.min(500) {
            prop_assert!(learning_rate(lr0, decay, t + 1) <= learning_rate(lr0, decay, t));
        }
        prop_assert!(learning_rate(lr0, decay, steps + 1) == 0.0);
        prop_assert!(learning_rate(lr0, decay, steps * 2 + 5) == 0.0);
    }

    #[test]
    fn shuffled_epochs_are_reproducible(seed in any::<u64>(), n in 4usize..60, bs in 1usize..4) {
        let ds = Dataset {
            images: Tensor::from_vec(vec![n, 1, 1, 1], (0..n).map(|i| i as f32).collect()).unwrap(),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
        };
        let epoch = || -> Vec<Vec<f32>> {
            batches(&ds, bs, 10, &mut Rng::new(seed), true).unwrap().map(|(x, _)| x.into_data()).collect()
        };
        prop_assert_eq!(epoch(), epoch());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generator_output_shape_and_range(s in any_scenario(), seed in any::<u64>(), n in 1usize..5) {
        let mut rng = Rng::new(seed);
        let g = random_generator(&s, small(), &mut rng).unwrap();
        let (z, y) = probes(&mut rng, &small(), n);
        for mode in [Mode::Eval, Mode::Train] {
            let out = g.forward(&z, &y, mode).unwrap();
            prop_assert_eq!(out.shape(), &[n, 1, 8, 8]);
            prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn eval_output_is_independent_of_batch_composition(s in any_scenario(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let g = random_generator(&s, small(), &mut rng).unwrap();
        let (z, y) = probes(&mut rng, &small(), 5);
        let batch = g.forward(&z, &y, Mode::Eval).unwrap();
        for i in 0..5 {
            let zi = Tensor::from_vec(vec![1, 6], z.row(i).to_vec()).unwrap();
            let yi = Tensor::from_vec(vec![1, 3], y.row(i).to_vec()).unwrap();
            let single = g.forward(&zi, &yi, Mode::Eval).unwrap();
            prop_assert_eq!(bits(&single), bits(&batch).chunks(64).nth(i).unwrap().to_vec());
        }
    }

    #[test]
    fn master_weights_stay_clipped(s in preset(), seed in any::<u64>(), lr in 0.01f64..20.0, steps in 1usize..5) {
        let mut cfg = TrainConfig::new(s);
        cfg.arch = small();
        cfg.batch_size = 3;
        cfg.lr0 = lr;
        cfg.lr_decay_per_step = 0.0;
        cfg.seed = seed;
        let mut state = TrainState::new(cfg).unwrap();
        let mut rng = Rng::new(seed ^ 1);
        let images: FloatTensor<f32> = uniform(&mut rng, &[3, 1, 8, 8], -1.0, 1.0).unwrap();
        let labels = one_hot(&[0, 1, 2], 3).unwrap();
        for _ in 0..steps {
            train_step(&mut state, &images, &labels).unwrap();
        }
        for slot in state.generator.params_mut() {
            if slot.clip {
                prop_assert!(slot.values.iter().all(|v| (-1.0..=1.0).contains(v)), "{}", slot.name);
            }
        }
    }

    #[test]
    fn save_load_is_bit_exact(s in any_scenario(), seed in any::<u64>()) {
        let g = random_generator(&s, small(), &mut Rng::new(seed)).unwrap();
        let back = modelio::from_bytes(&modelio::to_bytes(&g)).unwrap();
        prop_assert!(modelio::bit_identical(&g, &back));
        prop_assert_eq!(back, g);
    }

    #[test]
    fn export_matches_model(s in any_scenario(), seed in any::<u64>()) {
        let g = random_generator(&s, small(), &mut Rng::new(seed)).unwrap();
        let bundle = fold_and_binarize(&g).unwrap();
        let report = verify_export(&bundle, &g, 16, seed).unwrap();
        prop_assert!(report.integer_stages_match(), "{}", report.summary());
        prop_assert!(report.max_image_diff <= 1e-5, "{}", report.summary());
        prop_assert_eq!(render_header(&bundle), render_header(&fold_and_binarize(&g.clone()).unwrap()));
    }

    #[test]
    fn training_is_deterministic(s in preset(), seed in any::<u64>()) {
        let run = || {
            let mut cfg = TrainConfig::new(s.clone());
            cfg.arch = small();
            cfg.batch_size = 2;
            cfg.lr0 = 0.05;
            cfg.seed = seed;
            let mut state = TrainState::new(cfg).unwrap();
            let mut rng = Rng::new(3);
            let images: FloatTensor<f32> = uniform(&mut rng, &[2, 1, 8, 8], -1.0, 1.0).unwrap();
            let labels = one_hot(&[0, 2], 3).unwrap();
            for _ in 0..4 {
                train_step(&mut state, &images, &labels).unwrap();
            }
            (state.history, modelio::to_bytes(&state.generator))
        };
        prop_assert_eq!(run(), run());
    }
}

fn ints(a: &Activation<f32>) -> Vec<i64> {
    a.as_int().expect("integer stage").data().iter().map(|&v| i64::from(v)).collect()
}

/// `x [n, in] * sign(W)^T` with `W [out, in]`, in exact integer arithmetic.
fn dense_oracle(x: &[i64], n: usize, w: &FloatTensor<f32>) -> Vec<i64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0i64; n * out];
    for b in 0..n {
        for o in 0..out {
            y[b * out + o] = (0..inp).map(|i| x[b * inp + i] * sign(w.data()[o * inp + i]) as i64).sum();
        }
    }
    y
}

/// Transposed 5x5 stride-2 convolution (pad 2, output doubled) with `sign(W)`,
/// `W [cin, cout, 5, 5]`, by scattering each input pixel.
fn deconv_oracle(x: &[i64], n: usize, h: usize, w: &FloatTensor<f32>) -> Vec<i64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let oh = 2 * h;
    let mut y = vec![0i64; n * cout * oh * oh];
    for b in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..h {
                    let v = x[((b * cin + ci) * h + iy) * h + ix];
                    for co in 0..cout {
                        for ky in 0..5 {
                            for kx in 0..5 {
                                let (oy, ox) = ((iy * 2 + ky) as isize - 2, (ix * 2 + kx) as isize - 2);
                                if oy < 0 || ox < 0 || oy as usize >= oh || ox as usize >= oh {
                                    continue;
                                }
                                let wv = sign(w.data()[((ci * cout + co) * 5 + ky) * 5 + kx]) as i64;
                                y[((b * cout + co) * oh + oy as usize) * oh + ox as usize] += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Every integer linear stage equals the same stage computed exactly from the
/// preceding integer activations and `sign(W)`.
#[test]
fn integer_stages_match_exact_arithmetic() {
    for name in ["S1-2", "S2-1", "S2-2", "S3-1", "S3-2"] {
        let mut rng = Rng::new(17);
        let arch = small();
        let g: Generator<f32> = random_generator(&ScenarioConfig::preset(name).unwrap(), arch, &mut rng).unwrap();
        let (z, y) = probes(&mut rng, &arch, 4);
        let t = g.forward_trace(&z, &y).unwrap();
        let stage = |s: &str| t.stage(s).unwrap();
        assert_eq!(ints(stage("fc1")), dense_oracle(&ints(stage("input")), 4, &g.fc1.weight), "{name} fc1");
        assert_eq!(ints(stage("fc2")), dense_oracle(&ints(stage("bna1")), 4, &g.fc2.weight), "{name} fc2");
        if g.scenario.bdeconv1 {
            let d = deconv_oracle(&ints(stage("bna1b")), 4, arch.proj_size, &g.deconv1.weight);
            assert_eq!(ints(stage("deconv1")), d, "{name} deconv1");
        }
        if g.scenario.bdeconv2 {
            let d = deconv_oracle(&ints(stage("bna2")), 4, 2 * arch.proj_size, &g.deconv2.weight);
            assert_eq!(ints(stage("deconv2")), d, "{name} deconv2");
        }
        let input = ints(stage("input"));
        let a = i64::from(g.scenario.a_value.unwrap());
        assert!(input.iter().all(|v| v.abs() <= a), "{name} input range");
    }
}
