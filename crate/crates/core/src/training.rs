//! Conditional GAN training: straight-through gradients for binarized
//! layers, plain SGD with a linearly decaying learning rate, snapshots.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use crate::dataio::{batches, one_hot, write_grid, Dataset};
use crate::error::{Error, PathContext, Result};
use crate::layers::{
    build_generator, Arch, DiscCache, Discriminator, GenCache, Generator, Gradients, Mode, ParamSlot, ScenarioConfig,
};
use crate::modelio;
use crate::tensor::{uniform, FloatTensor, Real, Rng, Tensor};

pub const DEFAULT_BATCH: usize = 128;
pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_LR_DECAY: f64 = 1e-4 / 3000.0;
/// Side of the square probe grid written with each snapshot.
pub const PROBE_GRID: usize = 4;

const TAG_INIT: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_DATA: u64 = 3;
const TAG_PROBE: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scenario: ScenarioConfig,
    pub arch: Arch,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_per_step: f64,
    pub max_iterations: u64,
    /// `0` disables snapshots.
    pub snapshot_every: u64,
    pub seed: u64,
    /// Batches the loader may prepare ahead of the training loop.
    pub prefetch: usize,
}

impl TrainConfig {
    pub fn new(scenario: ScenarioConfig) -> Self {
        TrainConfig {
            scenario,
            arch: Arch::default(),
            batch_size: DEFAULT_BATCH,
            lr0: DEFAULT_LR,
            lr_decay_per_step: DEFAULT_LR_DECAY,
            max_iterations: 3000,
            snapshot_every: 100,
            seed: 0,
            prefetch: 4,
        }
    }

    pub fn lr(&self, t: u64) -> f64 {
        learning_rate(self.lr0, self.lr_decay_per_step, t)
    }
}

/// `max(0, lr0 - t * decay)`.
pub fn learning_rate(lr0: f64, decay: f64, t: u64) -> f64 {
    (lr0 - t as f64 * decay).max(0.0)
}

/// Straight-through gradient of `sign`: passes `grad_out` where
/// `|x_master| <= 1`.
pub fn ste_backward_sign<T: Real>(grad_out: &[T], x_master: &[T]) -> Result<Vec<T>> {
    if grad_out.len() != x_master.len() {
        return Err(Error::LengthMismatch {
            left: grad_out.len(),
            right: x_master.len(),
        });
    }
    Ok(grad_out
        .iter()
        .zip(x_master)
        .map(|(&g, &x)| if x.abs() <= T::one() { g } else { T::zero() })
        .collect())
}

/// `p -= lr * g`, then clip binarized masters into `[-1, 1]`. A zero
/// learning rate leaves every parameter untouched.
pub fn sgd_step<T: Real>(params: Vec<ParamSlot<'_, T>>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidConfig(format!("learning rate {lr}")));
    }
    if params.len() != grads.tensors.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.tensors.len(),
        });
    }
    for (slot, g) in params.iter().zip(&grads.tensors) {
        if slot.values.len() != g.len() {
            return Err(Error::LengthMismatch {
                left: slot.values.len(),
                right: g.len(),
            });
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    let lr = T::cast(lr);
    for (slot, g) in params.into_iter().zip(&grads.tensors) {
        for (p, &d) in slot.values.iter_mut().zip(g) {
            let v = *p - lr * d;
            *p = if slot.clip { v.max(-T::one()).min(T::one()) } else { v };
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against a constant target,
/// and its gradient with respect to each logit.
pub fn bce_with_logits<T: Real>(logits: &[T], target: f64) -> (f64, Vec<T>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .map(|&x| {
            let x = x.as_f64();
            loss += x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
            T::cast((sigmoid(x) - target) / n)
        })
        .collect();
    (loss / n, grad)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn concat_batch<T: Real>(a: &FloatTensor<T>, b: &FloatTensor<T>) -> Result<FloatTensor<T>> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    Tensor::from_vec(shape, [a.data(), b.data()].concat())
}

/// Discriminator loss `BCE(D(real), 1) + BCE(D(fake), 0)`, one pass over
/// the concatenated batch.
fn discriminator_pass<T: Real>(
    d: &Discriminator<T>,
    real: &FloatTensor<T>,
    y_real: &FloatTensor<T>,
    fake: &FloatTensor<T>,
    y_fake: &FloatTensor<T>,
) -> Result<(f64, FloatTensor<T>, DiscCache<T>)> {
    let (logits, cache) = d.forward_logits(&concat_batch(real, fake)?, &concat_batch(y_real, y_fake)?)?;
    let nr = real.shape()[0];
    let (lr, gr) = bce_with_logits(&logits.data()[..nr], 1.0);
    let (lf, gf) = bce_with_logits(&logits.data()[nr..], 0.0);
    let dlogits = Tensor::from_vec(logits.shape().to_vec(), [gr, gf].concat())?;
    Ok((lr + lf, dlogits, cache))
}

pub fn discriminator_objective<T: Real>(
    d: &Discriminator<T>,
    real: &FloatTensor<T>,
    y_real: &FloatTensor<T>,
    fake: &FloatTensor<T>,
    y_fake: &FloatTensor<T>,
) -> Result<f64> {
    Ok(discriminator_pass(d, real, y_real, fake, y_fake)?.0)
}

/// Loss and parameter gradients of the discriminator.
pub fn discriminator_grads<T: Real>(
    d: &Discriminator<T>,
    real: &FloatTensor<T>,
    y_real: &FloatTensor<T>,
    fake: &FloatTensor<T>,
    y_fake: &FloatTensor<T>,
) -> Result<(f64, Gradients<T>)> {
    let (loss, dlogits, cache) = discriminator_pass(d, real, y_real, fake, y_fake)?;
    Ok((loss, d.backward(&cache, &dlogits, false)?.1))
}

/// Non-saturating generator loss `BCE(D(G(z, y)), 1)` with train-mode
/// batch statistics.
pub fn generator_objective<T: Real>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    z: &FloatTensor<T>,
    y: &FloatTensor<T>,
) -> Result<f64> {
    let (fake, _) = g.forward_train(z, y)?;
    let (logits, _) = d.forward_logits(&fake, y)?;
    Ok(bce_with_logits(logits.data(), 1.0).0)
}

/// Loss and generator gradients for an already computed forward pass.
pub fn generator_grads<T: Real>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    cache: &GenCache<T>,
    fake: &FloatTensor<T>,
    y: &FloatTensor<T>,
) -> Result<(f64, Gradients<T>)> {
    let (logits, dcache) = d.forward_logits(fake, y)?;
    let (loss, dl) = bce_with_logits(logits.data(), 1.0);
    let dlogits = Tensor::from_vec(logits.shape().to_vec(), dl)?;
    let dimage = d.backward(&dcache, &dlogits, true)?.0.expect("image gradient requested");
    Ok((loss, g.backward(cache, &dimage)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub lr: f64,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    /// Number of completed steps.
    pub iteration: u64,
    pub rng: Rng,
    pub history: Vec<LossRecord>,
    probe_z: FloatTensor<f32>,
    probe_y: FloatTensor<f32>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let root = Rng::new(config.seed);
        let mut init = root.fork(TAG_INIT);
        let generator = build_generator(&config.scenario, config.arch, &mut init)?;
        let discriminator = Discriminator::new(&config.arch, &mut init)?;
        let mut probe = root.fork(TAG_PROBE);
        let k = PROBE_GRID * PROBE_GRID;
        let probe_z = uniform(&mut probe, &[k, config.arch.z_dim], -1.0, 1.0)?;
        let labels: Vec<u8> = (0..k).map(|i| (i % config.arch.classes) as u8).collect();
        let probe_y = one_hot(&labels, config.arch.classes)?;
        Ok(TrainState {
            rng: root.fork(TAG_NOISE),
            config,
            generator,
            discriminator,
            iteration: 0,
            history: Vec::new(),
            probe_z,
            probe_y,
        })
    }

    /// Eval-mode images for the fixed probe inputs.
    pub fn probe_images(&self) -> Result<FloatTensor<f32>> {
        self.generator.forward(&self.probe_z, &self.probe_y, Mode::Eval)
    }

    /// A noise batch: `z ~ U[-1, 1)`, labels uniform over classes.
    fn noise(&mut self, n: usize) -> Result<(FloatTensor<f32>, FloatTensor<f32>)> {
        let a = self.config.arch;
        let z = uniform(&mut self.rng, &[n, a.z_dim], -1.0, 1.0)?;
        let labels: Vec<u8> = (0..n).map(|_| self.rng.below(a.classes) as u8).collect();
        Ok((z, one_hot(&labels, a.classes)?))
    }
}

/// One discriminator update followed by one generator update. Returns
/// `(d_loss, g_loss)`; a non-finite loss aborts before anything is recorded.
pub fn train_step(state: &mut TrainState, images: &FloatTensor<f32>, labels: &FloatTensor<f32>) -> Result<(f64, f64)> {
    let n = images.shape()[0];
    let lr = state.config.lr(state.iteration);
    let (z, y) = state.noise(n)?;
    let (fake, gcache) = state.generator.forward_train(&z, &y)?;

    let (d_loss, dgrads) = discriminator_grads(&state.discriminator, images, labels, &fake, &y)?;
    let (g_loss, ggrads) = if d_loss.is_finite() {
        sgd_step(state.discriminator.params_mut(), &dgrads, lr)?;
        generator_grads(&state.generator, &state.discriminator, &gcache, &fake, &y)?
    } else {
        (f64::NAN, Gradients::default())
    };
    if !d_loss.is_finite() || !g_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
            d_loss,
            g_loss,
        });
    }
    sgd_step(state.generator.params_mut(), &ggrads, lr)?;
    // Once the schedule reaches zero the model is frozen, statistics included.
    if lr > 0.0 {
        state.generator.commit(&gcache);
    }
    state.history.push(LossRecord {
        iteration: state.iteration,
        d_loss,
        g_loss,
        lr,
    });
    state.iteration += 1;
    Ok((d_loss, g_loss))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotFiles {
    pub model: PathBuf,
    pub image: PathBuf,
}

/// Writes `snap_NNNNNN.bdcg` and `snap_NNNNNN.png` (4x4 probe grid) for the
/// current iteration.
pub fn snapshot(state: &TrainState, dir: impl AsRef<Path>) -> Result<SnapshotFiles> {
    let dir = dir.as_ref();
    let stem = format!("snap_{:06}", state.iteration);
    let files = SnapshotFiles {
        model: dir.join(format!("{stem}.bdcg")),
        image: dir.join(format!("{stem}.png")),
    };
    modelio::save(&state.generator, &files.model)?;
    write_grid(&state.probe_images()?, PROBE_GRID, &files.image)?;
    Ok(files)
}

pub fn write_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = BufWriter::new(fs::File::create(path).with_path(path)?);
    writeln!(f, "iteration,d_loss,g_loss,lr").with_path(path)?;
    for r in history {
        writeln!(f, "{},{},{},{}", r.iteration, r.d_loss, r.g_loss, r.lr).with_path(path)?;
    }
    f.flush().with_path(path)
}

pub struct RunOutcome {
    pub state: TrainState,
    pub snapshots: Vec<SnapshotFiles>,
    pub loss_csv: PathBuf,
    pub final_model: PathBuf,
}

/// Full training run into `out`: snapshots every `snapshot_every` steps
/// (starting at 0), `loss.csv`, and `final.bdcg`. Batches are prepared on a
/// loader thread at most `prefetch` ahead.
pub fn train(
    config: TrainConfig,
    data: &Dataset,
    out: impl AsRef<Path>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<RunOutcome> {
    let out = out.as_ref();
    let size = config.arch.image_size();
    if data.image_size() != (size, size) {
        return Err(Error::InvalidConfig(format!(
            "dataset images are {:?}, the generator produces {size}x{size}",
            data.image_size()
        )));
    }
    if data.len() < config.batch_size {
        return Err(Error::InvalidConfig(format!(
            "{} images cannot fill a batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    fs::create_dir_all(out).with_path(out)?;
    let loss_csv = out.join("loss.csv");
    let mut state = TrainState::new(config)?;
    let mut data_rng = Rng::new(state.config.seed).fork(TAG_DATA);
    let (batch_size, prefetch) = (state.config.batch_size, state.config.prefetch.max(1));
    let classes = state.config.arch.classes;
    batches(data, batch_size, classes, &mut data_rng.clone(), false)?;
    let mut snapshots = Vec::new();

    let result = std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel(prefetch);
        scope.spawn(move || loop {
            for batch in batches(data, batch_size, classes, &mut data_rng, true).expect("checked above") {
                if tx.send(batch).is_err() {
                    return;
                }
            }
        });
        let every = state.config.snapshot_every;
        while state.iteration < state.config.max_iterations {
            if every > 0 && state.iteration % every == 0 {
                snapshots.push(snapshot(&state, out)?);
            }
            let (images, labels) = rx.recv().expect("loader runs until the receiver is dropped");
            train_step(&mut state, &images, &labels)?;
            progress(state.history.last().expect("step recorded"));
        }
        drop(rx);
        Ok(())
    });
    write_loss_csv(&state.history, &loss_csv)?;
    result?;
    let final_model = out.join("final.bdcg");
    modelio::save(&state.generator, &final_model)?;
    Ok(RunOutcome {
        state,
        snapshots,
        loss_csv,
        final_model,
    })
}
