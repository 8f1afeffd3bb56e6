//! The operations behind each CLI command. Every function takes explicit
//! paths and seeds and writes its files atomically.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::compositor::{compose_stack, Composite, LayerImage};
use crate::error::{CganError, Result};
use crate::losses::LossReport;
use crate::metrics::{q_metric, QReport, SsimParams};
use crate::nets::{sample_prior, Generated, ModelBundle};
use crate::runtime::config::RunConfig;
use crate::runtime::data::{self, load_dataset};
use crate::runtime::imageio;
use crate::runtime::synthetic::{self, SyntheticRecipe};
use crate::tensor::Tensor;
use crate::trainer::{TrainObserver, Trainer};

/// Generation runs in fixed-size batches. Batch normalization uses batch
/// statistics, so a sample depends on the batch it was generated in; fixing
/// the chunking keeps output a pure function of (checkpoint, count, seed).
pub const SAMPLE_CHUNK: usize = 64;

pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration}"))
}

struct RunRecorder {
    out: PathBuf,
    log: fs::File,
}

impl TrainObserver for RunRecorder {
    fn on_report(&mut self, report: &LossReport) -> Result<()> {
        let path = self.out.join(TRAIN_LOG);
        writeln!(self.log, "{}", report.to_json_line()).map_err(|e| CganError::io(&path, e))?;
        Ok(())
    }

    fn on_checkpoint(&mut self, trainer: &Trainer) -> Result<()> {
        let path = checkpoint_path(&self.out, trainer.iteration());
        trainer.save(&path)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

/// Trains per `config`, writing `ckpt_{iter}` files and a JSON-lines log to
/// `out`. With `resume`, continues from that checkpoint up to the configured
/// iteration count.
pub fn train(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Trainer> {
    let dataset = load_dataset(&config.dataset_spec())?;
    log::info!("loaded {} training images", dataset.len());
    let mut trainer = match resume {
        None => Trainer::new(config.train.clone())?,
        Some(path) => {
            let mut t = Trainer::resume(path)?;
            if t.bundle().architecture() != &config.train.architecture() {
                return Err(CganError::Config(format!(
                    "{} was trained with a different architecture than the config describes",
                    path.display()
                )));
            }
            t.set_iterations(config.train.iterations);
            t
        }
    };
    fs::create_dir_all(out).map_err(|e| CganError::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CganError::io(&log_path, e))?;
    let mut recorder = RunRecorder {
        out: out.to_path_buf(),
        log,
    };
    trainer.fit(&dataset.images, &mut recorder)?;
    Ok(trainer)
}

/// Generates `count` samples in [`SAMPLE_CHUNK`]-sized batches from one seeded stream.
pub fn generate(bundle: &ModelBundle, count: usize, seed: u64) -> Result<Vec<Generated>> {
    if count == 0 {
        return Err(CganError::Argument("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut left = count;
    while left > 0 {
        let b = left.min(SAMPLE_CHUNK);
        let z = bundle.sample_latents(b, &mut rng)?;
        out.push(bundle.forward_generate(&z)?);
        left -= b;
    }
    Ok(out)
}

/// Final composites of [`generate`] as `[count, 3, S, S]`.
pub fn sample_images(bundle: &ModelBundle, count: usize, seed: u64) -> Result<Tensor> {
    let items: Vec<Tensor> = generate(bundle, count, seed)?
        .iter()
        .flat_map(|g| g.final_image().rgb().unstack())
        .collect();
    Tensor::stack(&items)
}

fn grid_columns(count: usize) -> usize {
    (count as f64).sqrt().ceil().max(1.0) as usize
}

/// Writes `sample_{i}.png` per sample and a `samples.png` overview.
pub fn sample(ckpt: &Path, out: &Path, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let bundle = ModelBundle::load(ckpt)?;
    let images = sample_images(&bundle, count, seed)?.unstack();
    let mut paths = Vec::with_capacity(count);
    for (i, img) in images.iter().enumerate() {
        let p = out.join(format!("sample_{i:04}.png"));
        imageio::write_rgb(&p, img)?;
        paths.push(p);
    }
    imageio::write_rgb(&out.join("samples.png"), &imageio::grid(&images, grid_columns(count), 2)?)?;
    Ok(paths)
}

/// Files written for one decomposed sample.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub dir: PathBuf,
    /// `layer_{t}.png`, RGBA, t = 1..n.
    pub layers: Vec<PathBuf>,
    /// `composite_{t}.png`, the running composite after layer t.
    pub composites: Vec<PathBuf>,
    pub preview: PathBuf,
}

fn quantized(t: &Tensor) -> Tensor {
    t.map(|v| imageio::dequantize(imageio::quantize(v)))
}

/// For each sample, exports every generator's layer, the running composites
/// and a preview (layers over a checkerboard on top, composites below).
///
/// Composites are rebuilt from the 8-bit layers, so the exported files are
/// consistent with each other up to the final rounding.
pub fn decompose(ckpt: &Path, out: &Path, count: usize, seed: u64) -> Result<Vec<Decomposition>> {
    let bundle = ModelBundle::load(ckpt)?;
    let n = bundle.architecture().generators;
    let mut result = Vec::with_capacity(count);
    for g in generate(&bundle, count, seed)? {
        for item in 0..g.layers[0].extents().0 {
            let dir = out.join(format!("sample_{:04}", result.len()));
            let layers: Vec<LayerImage> = g
                .layers
                .iter()
                .map(|l| {
                    let l = l.item(item);
                    LayerImage::new(quantized(l.rgb()), quantized(l.alpha()))
                })
                .collect::<Result<_>>()?;
            let stack = compose_stack(&layers)?;
            let mut d = Decomposition {
                dir: dir.clone(),
                layers: Vec::new(),
                composites: Vec::new(),
                preview: dir.join("preview.png"),
            };
            let mut previews = Vec::with_capacity(2 * n);
            for (t, l) in layers.iter().enumerate() {
                let p = dir.join(format!("layer_{}.png", t + 1));
                imageio::write_layer(&p, l, 0)?;
                previews.push(imageio::preview_on_checkerboard(&l.to_rgba().unstack()[0])?);
                d.layers.push(p);
            }
            for (t, c) in stack.intermediates.iter().enumerate() {
                let p = dir.join(format!("composite_{}.png", t + 1));
                let img = c.rgb().unstack().remove(0);
                imageio::write_rgb(&p, &img)?;
                previews.push(img);
                d.composites.push(p);
            }
            imageio::write_rgb(&d.preview, &imageio::grid(&previews, n, 2)?)?;
            result.push(d);
        }
    }
    Ok(result)
}

/// Re-composes the exported layer PNGs and returns the largest per-channel
/// difference to the exported final composite.
pub fn recompose_error(d: &Decomposition) -> Result<f64> {
    let layers = d
        .layers
        .iter()
        .map(|p| imageio::read_layer(p))
        .collect::<Result<Vec<_>>>()?;
    let stack = compose_stack(&layers)?;
    let recomposed = stack.final_image().rgb().unstack().remove(0);
    let exported = imageio::read_rgb(d.composites.last().expect("at least one layer"))?;
    Ok(recomposed.max_abs_diff(&exported))
}

fn require_encoders(bundle: &ModelBundle, command: &str) -> Result<()> {
    let v = bundle.architecture().variant;
    if !v.has_encoders() {
        return Err(CganError::Config(format!(
            "{command} needs a checkpoint with encoders (cgan-vae or cgan-vae-a); this one is {v}"
        )));
    }
    Ok(())
}

fn load_input(bundle: &ModelBundle, path: &Path) -> Result<Tensor> {
    data::prepare(&imageio::read_rgb(path)?, bundle.architecture().image_size)
}

/// Posterior means of every encoder for a `[B, 3, S, S]` batch.
fn encode_means(bundle: &ModelBundle, batch: &Tensor) -> Result<Vec<Tensor>> {
    let x = Composite::new(batch.clone())?;
    (0..bundle.architecture().generators)
        .map(|i| bundle.encode(i, &x).map(|e| e.mu))
        .collect()
}

/// Encodes an image with every encoder (posterior means), regenerates it and
/// writes `reconstruction.png` (input left, reconstruction right).
pub fn reconstruct(ckpt: &Path, image: &Path, out: &Path) -> Result<PathBuf> {
    let bundle = ModelBundle::load(ckpt)?;
    require_encoders(&bundle, "reconstruct")?;
    let x = load_input(&bundle, image)?;
    let s = bundle.architecture().image_size;
    let batch = x.clone().reshape(&[1, 3, s, s])?;
    let z = encode_means(&bundle, &batch)?;
    let recon = bundle.forward_generate(&z)?.final_image().rgb().unstack().remove(0);
    let path = out.join("reconstruction.png");
    imageio::write_rgb(&path, &imageio::grid(&[x, recon], 2, 2)?)?;
    Ok(path)
}

/// Encodes `a` with every encoder, then replaces encoder `index`'s code with
/// the one it gives for `b`. Writes `swap.png`: a, b, reconstruction of a, swapped.
pub fn swap(ckpt: &Path, a: &Path, b: &Path, index: usize, out: &Path) -> Result<PathBuf> {
    let bundle = ModelBundle::load(ckpt)?;
    require_encoders(&bundle, "swap")?;
    let n = bundle.architecture().generators;
    if index >= n {
        return Err(CganError::Argument(format!(
            "encoder index {index} out of range (have {n})"
        )));
    }
    let (xa, xb) = (load_input(&bundle, a)?, load_input(&bundle, b)?);
    let pair = Tensor::stack(&[xa.clone(), xb.clone()])?;
    let mu = encode_means(&bundle, &pair)?;
    // Row 0 reconstructs a, row 1 is a with one code taken from b.
    let z: Vec<Tensor> = mu
        .iter()
        .enumerate()
        .map(|(i, m)| m.gather(&[0, if i == index { 1 } else { 0 }]))
        .collect();
    let out_imgs = bundle.forward_generate(&z)?.final_image().rgb().unstack();
    let path = out.join("swap.png");
    let tiles = [xa, xb, out_imgs[0].clone(), out_imgs[1].clone()];
    imageio::write_rgb(&path, &imageio::grid(&tiles, 4, 2)?)?;
    Ok(path)
}

/// A `rows × cols` grid where each row shares `z_1` and draws `z_2..z_n` per cell.
pub fn fix_z1(ckpt: &Path, rows: usize, cols: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    if rows == 0 || cols == 0 {
        return Err(CganError::Argument("rows and cols must be at least 1".into()));
    }
    let bundle = ModelBundle::load(ckpt)?;
    let arch = *bundle.architecture();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z1_rows = sample_prior(rows, arch.latent_dim, &mut rng)?;
    let z1 = z1_rows.gather(&(0..rows * cols).map(|k| k / cols).collect::<Vec<_>>());
    let mut z = vec![z1];
    for _ in 1..arch.generators {
        z.push(sample_prior(rows * cols, arch.latent_dim, &mut rng)?);
    }
    let images = bundle.forward_generate(&z)?.final_image().rgb().unstack();
    let path = out.join("fix_z1.png");
    imageio::write_rgb(&path, &imageio::grid(&images, cols, 2)?)?;
    Ok(path)
}

/// Where the evaluated samples come from.
#[derive(Clone, Debug)]
pub enum SampleSource {
    Checkpoint { path: PathBuf, count: usize, seed: u64 },
    Directory(PathBuf),
}

/// Q of a sample set against the images of `test_dir`; writes
/// `q_report.json` and `q_items.csv` to `out`.
pub fn eval(samples: &SampleSource, test_dir: &Path, out: &Path) -> Result<QReport> {
    let test = load_native(test_dir)?;
    let s = test.images.shape()[2];
    let sample_set = match samples {
        SampleSource::Checkpoint { path, count, seed } => {
            let bundle = ModelBundle::load(path)?;
            if bundle.architecture().image_size != s {
                return Err(CganError::Dimension(format!(
                    "model generates {0}x{0} images, test set is {s}x{s}",
                    bundle.architecture().image_size
                )));
            }
            sample_images(&bundle, *count, *seed)?
        }
        SampleSource::Directory(dir) => data::load_directory(dir, s)?.images,
    };
    let report = q_metric(&sample_set, &test.images, &SsimParams::default())?;
    report.write(&out.join("q_report.json"), Some(&out.join("q_items.csv")))?;
    Ok(report)
}

/// Loads a test directory at the resolution of its first image.
fn load_native(dir: &Path) -> Result<data::Dataset> {
    let first = data::list_images(dir)?
        .into_iter()
        .next()
        .ok_or_else(|| CganError::Argument(format!("no test images in {}", dir.display())))?;
    let img = imageio::read_rgb(&first)?;
    let side = img.shape()[1].min(img.shape()[2]);
    data::load_directory(dir, side)
}

/// `count` images of i.i.d. uniform noise, `[count, 3, S, S]`.
pub fn uniform_noise_images(count: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[count, 3, size, size], |_| rng.random_range(0.0..1.0))
}

/// Writes scenes `indices` of `recipe` as `scene_{i}.png`, plus each scene's
/// ground-truth layers under `layers/scene_{i}_{t}.png` when `with_layers`.
pub fn write_synthetic(
    recipe: &SyntheticRecipe,
    indices: std::ops::Range<usize>,
    out: &Path,
    with_layers: bool,
) -> Result<usize> {
    recipe.validate()?;
    indices
        .clone()
        .into_par_iter()
        .try_for_each(|i| -> Result<()> {
            let scene = synthetic::render_scene(recipe, i as u64)?;
            imageio::write_rgb(&out.join(format!("scene_{i:05}.png")), &scene.image)?;
            if with_layers {
                for (t, l) in scene.layers.iter().enumerate() {
                    let p = out.join("layers").join(format!("scene_{i:05}_{}.png", t + 1));
                    imageio::write_layer(&p, l, 0)?;
                }
            }
            Ok(())
        })?;
    Ok(indices.len())
}
