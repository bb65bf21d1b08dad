//! `bdcgan`: train a scenario, generate digits, export the integer
//! generator, verify an export.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime error, 3 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bdcgan_core::dataio::{load_mnist_dir, one_hot, write_grid};
use bdcgan_core::layers::{Mode, ScenarioConfig};
use bdcgan_core::modelio::{self, emit_header, fold_and_binarize, manifest, verify_export, ExportBundle};
use bdcgan_core::tensor::{uniform, Rng};
use bdcgan_core::training::{train, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Probes checked by `export` before anything is written.
const EXPORT_PROBES: usize = 16;
const IMAGE_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "bdcgan", version, about = "Binarized conditional DCGAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair on MNIST.
    Train(TrainArgs),
    /// Generate a grid of digits of one class from a saved model.
    Generate(GenerateArgs),
    /// Fold, pack and verify a model, then write a C header or binary bundle.
    Export(ExportArgs),
    /// Compare the integer run-time path against the model on random probes.
    Verify(VerifyArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Preset name (S0, S1-1, S1-2, S2-1, S2-2, S3-1, S3-2) or `custom`.
    #[arg(long, default_value = "S3-1")]
    scenario: String,
    /// JSON scenario flags; required for `custom`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train-images-idx3-ubyte[.gz] and train-labels-idx1-ubyte[.gz].
    #[arg(long)]
    mnist_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// 0 disables snapshots.
    #[arg(long, default_value_t = 100)]
    snapshot_every: u64,
    /// Use only the first N images (0 = all).
    #[arg(long, default_value_t = 0)]
    limit: usize,
    #[arg(long, default_value_t = 4)]
    prefetch: usize,
    /// Print losses every N iterations (0 = silent).
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    label: usize,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Output image; `.pgm` writes binary PGM, anything else PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Cheader,
    Binary,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "cheader")]
    format: Format,
    #[arg(long)]
    out: PathBuf,
    /// Also write a JSON manifest of the emitted arrays.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 64)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check this binary bundle instead of a fresh export of the model.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

/// A flag value that parsed but makes no sense; exits with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn scenario(args: &TrainArgs) -> Result<ScenarioConfig> {
    match (&args.config, args.scenario.as_str()) {
        (Some(path), "custom") => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ScenarioConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
        }
        (None, "custom") => Err(usage("--scenario custom needs --config <json>")),
        (Some(_), name) => Err(usage(format!("--config only applies to --scenario custom (got {name})"))),
        (None, name) => ScenarioConfig::preset(name).map_err(|e| usage(e.to_string())),
    }
}

fn cmd_train(args: TrainArgs) -> Result<u8> {
    let scenario = scenario(&args)?;
    let data = load_mnist_dir(&args.mnist_dir)?.truncate(args.limit)?;
    let config = TrainConfig {
        batch_size: args.batch,
        max_iterations: args.iters,
        snapshot_every: args.snapshot_every,
        seed: args.seed,
        prefetch: args.prefetch,
        ..TrainConfig::new(scenario)
    };
    eprintln!(
        "training {} on {} images: {} iterations, batch {}",
        config.scenario.name,
        data.len(),
        config.max_iterations,
        config.batch_size
    );
    let log_every = args.log_every;
    let run = train(config, &data, &args.out, |r| {
        if log_every > 0 && (r.iteration + 1) % log_every == 0 {
            eprintln!("iter {:>5}  d_loss {:.4}  g_loss {:.4}  lr {:.3e}", r.iteration + 1, r.d_loss, r.g_loss, r.lr);
        }
    })?;
    println!("snapshots: {}", run.snapshots.len());
    println!("losses: {}", run.loss_csv.display());
    println!("model: {}", run.final_model.display());
    Ok(0)
}

fn cmd_generate(args: GenerateArgs) -> Result<u8> {
    let g = modelio::load(&args.model)?;
    let classes = g.arch.classes;
    if args.label >= classes {
        return Err(usage(format!("label {} out of range 0..={}", args.label, classes - 1)));
    }
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let mut rng = Rng::new(args.seed);
    let z = uniform(&mut rng, &[args.count, g.arch.z_dim], -1.0, 1.0)?;
    let y = one_hot(&vec![args.label as u8; args.count], classes)?;
    let images = g.forward(&z, &y, Mode::Eval)?;
    let cols = (args.count as f64).sqrt().ceil() as usize;
    write_grid(&images, cols, &args.out)?;
    println!("wrote {} images of class {} to {}", args.count, args.label, args.out.display());
    Ok(0)
}

fn cmd_export(args: ExportArgs) -> Result<u8> {
    let g = modelio::load(&args.model)?;
    let bundle = fold_and_binarize(&g)?;
    let report = verify_export(&bundle, &g, EXPORT_PROBES, 0)?;
    if !report.passes(IMAGE_TOLERANCE) {
        eprintln!("{}", report.summary());
        eprintln!("verification failed; nothing written");
        return Ok(EXIT_VERIFY);
    }
    if bundle.binarized_stages().is_empty() {
        eprintln!("warning: scenario {} binarizes nothing; the export holds float32 arrays only", g.scenario.name);
    }
    match args.format {
        Format::Cheader => emit_header(&bundle, &args.out)?,
        Format::Binary => write(&args.out, &bundle.to_bytes())?,
    }
    if let Some(path) = &args.manifest {
        write(path, serde_json::to_string_pretty(&manifest(&bundle))?.as_bytes())?;
    }
    println!("{}", report.summary());
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8> {
    let g = modelio::load(&args.model)?;
    let bundle = match &args.bundle {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let b = ExportBundle::from_bytes(&bytes)?;
            if b.scenario != g.scenario || b.arch != g.arch {
                bail!("bundle {} was not exported from this model's scenario/architecture", path.display());
            }
            b
        }
        None => fold_and_binarize(&g)?,
    };
    let report = verify_export(&bundle, &g, args.probes, args.seed)?;
    println!("{}", report.summary());
    Ok(if report.integer_stages_match() { 0 } else { EXIT_VERIFY })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Export(a) => cmd_export(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
