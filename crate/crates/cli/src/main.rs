use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cgan_core::fsio;
use cgan_core::nets::Variant;
use cgan_core::runtime::commands::{self, SampleSource};
use cgan_core::runtime::config::RunConfig;
use cgan_core::runtime::synthetic::SyntheticRecipe;

#[derive(Parser)]
#[command(name = "cgan", version, about = "Train and probe composite GANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, the training log and the resolved config to --out.
    Train(TrainArgs),
    /// Write generated images and an overview grid.
    Sample(SampleArgs),
    /// Export every generator's RGBA layer and the running composites per sample.
    Decompose(SampleArgs),
    /// Encode an image and regenerate it (needs a cgan-vae checkpoint).
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate image A with one encoder's code taken from image B.
    Swap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "image-a")]
        image_a: PathBuf,
        #[arg(long = "image-b")]
        image_b: PathBuf,
        /// Zero-based index of the encoder whose code is swapped.
        #[arg(long)]
        encoder: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid where each row shares z1 and draws the remaining codes per cell.
    FixZ1 {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score samples against a test directory with the best-match SSIM metric.
    Eval(EvalArgs),
    /// Render synthetic layered scenes to PNG files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// Index of the first scene; scenes are addressed by index.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write each scene's ground-truth layers.
        #[arg(long)]
        with_layers: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Continue from this training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Generate the samples from this checkpoint.
    #[arg(long, conflicts_with = "samples", required_unless_present = "samples")]
    ckpt: Option<PathBuf>,
    /// Use the images of this directory as the samples.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.variant {
        if !v.has_alpha_loss() {
            cfg.train.alpha_u = None;
            cfg.train.alpha_weight = None;
        }
        cfg.train.variant = v;
    }
    if let Some(n) = args.n {
        cfg.train.n = n;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(it) = args.iterations {
        cfg.train.iterations = it;
    }
    cfg.validate().context("invalid run configuration")?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = run_config(&args)?;
    fsio::write_atomic(&args.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let trainer = commands::train(&cfg, &args.out, args.resume.as_deref())?;
    if let Some(last) = trainer.history().last() {
        println!(
            "iteration {}: gan {:.4}, D(real) {:.3}, D(fake) {:.3}",
            last.iteration, last.gan, last.d_real_mean, last.d_fake_mean
        );
    }
    println!(
        "checkpoint: {}",
        commands::checkpoint_path(&args.out, trainer.iteration()).display()
    );
    Ok(())
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let source = match (args.ckpt, args.samples) {
        (Some(path), None) => SampleSource::Checkpoint {
            path,
            count: args.count,
            seed: args.seed,
        },
        (None, Some(dir)) => SampleSource::Directory(dir),
        _ => bail!("pass exactly one of --ckpt and --samples"),
    };
    let report = commands::eval(&source, &args.test, &args.out)?;
    println!(
        "Q = {:.4} ± {:.4} ({} samples, {} test images)",
        report.q, report.std_across_test_items, report.samples, report.tests
    );
    println!("report: {}", args.out.join("q_report.json").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(args)?,
        Command::Sample(a) => print_paths(&commands::sample(&a.ckpt, &a.out, a.count, a.seed)?),
        Command::Decompose(a) => {
            for d in commands::decompose(&a.ckpt, &a.out, a.count, a.seed)? {
                println!("{}", d.dir.display());
            }
        }
        Command::Reconstruct { ckpt, image, out } => {
            print_paths(&[commands::reconstruct(&ckpt, &image, &out)?])
        }
        Command::Swap {
            ckpt,
            image_a,
            image_b,
            encoder,
            out,
        } => print_paths(&[commands::swap(&ckpt, &image_a, &image_b, encoder, &out)?]),
        Command::FixZ1 {
            ckpt,
            rows,
            cols,
            seed,
            out,
        } => print_paths(&[commands::fix_z1(&ckpt, rows, cols, seed, &out)?]),
        Command::Eval(args) => eval(args)?,
        Command::Synth {
            out,
            count,
            start,
            layers,
            size,
            seed,
            with_layers,
        } => {
            let recipe = SyntheticRecipe {
                layers,
                size,
                seed,
                ..SyntheticRecipe::default()
            };
            let n = commands::write_synthetic(&recipe, start..start + count, &out, with_layers)?;
            println!("wrote {n} scenes to {}", out.display());
        }
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn out_dir(command: &Command) -> &Path {
    match command {
        Command::Train(a) => &a.out,
        Command::Sample(a) | Command::Decompose(a) => &a.out,
        Command::Reconstruct { out, .. }
        | Command::Swap { out, .. }
        | Command::FixZ1 { out, .. }
        | Command::Synth { out, .. } => out,
        Command::Eval(a) => &a.out,
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    ensure_dir(out_dir(&cli.command))?;
    run(cli)
}
