//! Shared inputs for the benchmarks.

use bdcgan_core::dataio::one_hot;
use bdcgan_core::layers::{Arch, Generator, ScenarioConfig};
use bdcgan_core::modelio::random_generator;
use bdcgan_core::tensor::{uniform, FloatTensor, Rng};

/// A full-size generator with random parameters and a batch of probes.
pub fn generator_with_probes(scenario: &str, batch: usize) -> (Generator<f32>, FloatTensor<f32>, FloatTensor<f32>) {
    let mut rng = Rng::new(1);
    let arch = Arch::default();
    let g = random_generator(&ScenarioConfig::preset(scenario).expect("preset"), arch, &mut rng).expect("generator");
    let z = uniform(&mut rng, &[batch, arch.z_dim], -1.0, 1.0).expect("z");
    let labels: Vec<u8> = (0..batch).map(|i| (i % arch.classes) as u8).collect();
    let y = one_hot(&labels, arch.classes).expect("labels");
    (g, z, y)
}

/// `n` random `+1` / `-1` values.
pub fn bipolar(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 }).collect()
}
