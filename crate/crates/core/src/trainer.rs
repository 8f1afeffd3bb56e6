//! Training loops: the adversarial loop over a generator stack and its
//! variational extension with one encoder per generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::compositor::graph::LayerVars;
use crate::error::{CganError, Result};
use crate::losses::{self, AlphaLossConfig, GeneratorReport, LossReport};
use crate::nets::checkpoint::{Checkpoint, CheckpointHeader};
use crate::nets::{reparameterize_graph, Architecture, BoundBundle, ModelBundle, ParamGroup, Variant};
use crate::optim::{global_norm, Adam, AdamConfig, Direction, Moments};
use crate::tensor::Tensor;

/// Every knob of a training run. Unknown keys are rejected when deserializing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Number of generators.
    pub n: usize,
    /// Minibatch size.
    pub m: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub image_size: usize,
    pub generator_width: usize,
    pub discriminator_width: usize,
    pub encoder_width: usize,
    pub gamma_d: f64,
    pub gamma_g: f64,
    pub gamma_g_gan: f64,
    pub gamma_g_vae: f64,
    pub gamma_e: f64,
    /// Alpha budget per layer; defaults to 40% of the pixels when the variant uses the alpha loss.
    pub alpha_u: Option<f64>,
    pub alpha_weight: Option<f64>,
    pub iterations: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Generators maximize `ln D(G(z))` instead of minimizing `ln(1 - D(G(z)))`.
    pub non_saturating: bool,
    /// One backward pass for all generator (and encoder) updates of an iteration
    /// instead of a fresh forward pass before each.
    pub single_backward: bool,
    /// Checkpoint period in iterations; 0 disables checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        let adam = AdamConfig::default();
        TrainConfig {
            variant: arch.variant,
            n: arch.generators,
            m: 64,
            latent_dim: arch.latent_dim,
            hidden_dim: arch.hidden_dim,
            image_size: arch.image_size,
            generator_width: arch.generator_width,
            discriminator_width: arch.discriminator_width,
            encoder_width: arch.encoder_width,
            gamma_d: 1e-4,
            gamma_g: 2e-4,
            gamma_g_gan: 2e-4,
            gamma_g_vae: 2e-6,
            gamma_e: 2e-4,
            alpha_u: None,
            alpha_weight: None,
            iterations: 10_000,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            clip_norm: adam.clip_norm,
            non_saturating: false,
            single_backward: false,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Alpha weight used when a `+A` variant does not set one.
    pub const DEFAULT_ALPHA_WEIGHT: f64 = 0.01;

    pub fn architecture(&self) -> Architecture {
        Architecture {
            variant: self.variant,
            generators: self.n,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            image_size: self.image_size,
            generator_width: self.generator_width,
            discriminator_width: self.discriminator_width,
            encoder_width: self.encoder_width,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip_norm: self.clip_norm,
        }
    }

    /// The alpha loss settings, present exactly for `+A` variants.
    pub fn alpha(&self) -> Result<Option<AlphaLossConfig>> {
        if !self.variant.has_alpha_loss() {
            return Ok(None);
        }
        let pixels = self.image_size * self.image_size;
        let weight = self.alpha_weight.unwrap_or(Self::DEFAULT_ALPHA_WEIGHT);
        let cfg = match self.alpha_u {
            Some(u) => AlphaLossConfig::new(u, weight, pixels)?,
            None => AlphaLossConfig::with_default_budget(weight, pixels)?,
        };
        Ok(Some(cfg))
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        if self.m == 0 {
            return Err(CganError::Config("m (minibatch size) must be at least 1".into()));
        }
        let rates = [
            ("gamma_d", self.gamma_d),
            ("gamma_g", self.gamma_g),
            ("gamma_g_gan", self.gamma_g_gan),
            ("gamma_g_vae", self.gamma_g_vae),
            ("gamma_e", self.gamma_e),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CganError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.variant.has_alpha_loss() && (self.alpha_u.is_some() || self.alpha_weight.is_some()) {
            return Err(CganError::Config(format!(
                "alpha_u / alpha_weight only apply to the alpha-loss variants, not {}",
                self.variant
            )));
        }
        self.alpha()?;
        self.adam().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| CganError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Everything besides the parameters that a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    pub optim: Adam,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossReport>,
}

impl TrainState {
    /// The training stream is separate from the one that initialized the parameters.
    pub fn new(config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        TrainState {
            iteration: 0,
            optim: Adam::new(config.adam()),
            rng,
            history: Vec::new(),
        }
    }
}

fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn check_batch(config: &TrainConfig, batch: &Tensor) -> Result<()> {
    let s = config.image_size;
    let (b, c, h, w) = batch.dims4()?;
    if b == 0 || c != 3 || h != s || w != s {
        return Err(CganError::Dimension(format!(
            "training batch must be [B >= 1, 3, {s}, {s}], got {:?}",
            batch.shape()
        )));
    }
    Ok(())
}

fn constants(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

fn ensure_finite(value: f64, term: &str, iteration: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CganError::NonFinite {
            term: term.to_string(),
            iteration,
        })
    }
}

/// Gradients of the listed groups, zero-filled where the loss does not reach a parameter.
fn collect_grads(
    bundle: &ModelBundle,
    bound: &BoundBundle,
    grads: &mut Gradients,
    groups: &[ParamGroup],
) -> Vec<Vec<Tensor>> {
    groups
        .iter()
        .map(|&g| {
            bound
                .vars(g)
                .iter()
                .zip(bundle.params(g).tensors())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect()
        })
        .collect()
}

/// Applies one clipped update per group, sharing one global-norm clip. Returns
/// whether clipping fired.
fn apply_updates(
    bundle: &mut ModelBundle,
    optim: &mut Adam,
    groups: &[ParamGroup],
    grads: &[Vec<Tensor>],
    lr: f64,
    direction: Direction,
    iteration: u64,
) -> Result<bool> {
    let norm = global_norm(grads.iter().map(Vec::as_slice));
    let names: Vec<String> = groups.iter().map(ToString::to_string).collect();
    ensure_finite(norm, &format!("gradient of {}", names.join("+")), iteration)?;
    let scale = optim.clip_scale(norm);
    if scale < 1.0 {
        log::debug!("clipped gradient of {groups:?}: norm {norm:.3e}");
    }
    for (&g, gr) in groups.iter().zip(grads) {
        optim.update(g, bundle.params_mut(g), gr, lr, scale, direction)?;
    }
    Ok(scale < 1.0)
}

/// Weighted alpha loss over every generator layer.
fn alpha_graph(tape: &mut Tape, layers: &[LayerVars], cfg: &AlphaLossConfig) -> Var {
    let mut total = losses::graph::alpha(tape, layers[0].alpha, cfg.u);
    for l in &layers[1..] {
        let a = losses::graph::alpha(tape, l.alpha, cfg.u);
        total = tape.add(total, a);
    }
    tape.scale(total, cfg.weight)
}

struct VaeVars {
    kl: Var,
    pixel: Var,
    feature: Var,
    loss: Var,
}

/// Encoders read the real batch, the reparameterized codes drive the
/// conditioner, generators and compositor, and the discriminator supplies the
/// feature targets.
fn vae_graph(bundle: &ModelBundle, tape: &mut Tape, bound: &BoundBundle, real: Var, eps: &[Tensor]) -> VaeVars {
    let mut kl = None;
    let mut zs = Vec::with_capacity(eps.len());
    for (i, e) in eps.iter().enumerate() {
        let enc = bundle.encode_graph(tape, bound, i, real);
        let ev = tape.constant(e.clone());
        zs.push(reparameterize_graph(tape, enc, ev));
        let k = losses::graph::kl(tape, enc);
        kl = Some(match kl {
            None => k,
            Some(acc) => tape.add(acc, k),
        });
    }
    let kl = kl.expect("at least one encoder");
    let gen = bundle.generate_graph(tape, bound, &zs);
    let xhat = gen.final_image();
    let pixel = losses::graph::gaussian_log_likelihood(tape, real, xhat);
    let fx = bundle.discriminate_graph(tape, bound, real).feature;
    let fxhat = bundle.discriminate_graph(tape, bound, xhat).feature;
    let feature = losses::graph::gaussian_log_likelihood(tape, fx, fxhat);
    let loss = losses::graph::vae(tape, kl, pixel, feature);
    VaeVars {
        kl,
        pixel,
        feature,
        loss,
    }
}

/// Ascent step of the discriminator on the adversarial value. Also fills the
/// per-generator alpha diagnostics from the same forward pass.
fn discriminator_step(
    config: &TrainConfig,
    alpha: Option<&AlphaLossConfig>,
    bundle: &mut ModelBundle,
    state: &mut TrainState,
    real: &Tensor,
    z: &[Tensor],
    report: &mut LossReport,
) -> Result<()> {
    let groups = [ParamGroup::Discriminator];
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, &groups);
    let zs = constants(&mut tape, z);
    let gen = bundle.generate_graph(&mut tape, &bound, &zs);
    let xr = tape.constant(real.clone());
    let d_real = bundle.discriminate_graph(&mut tape, &bound, xr);
    let d_fake = bundle.discriminate_graph(&mut tape, &bound, gen.final_image());
    let value = losses::graph::gan_value(&mut tape, d_real.prob, d_fake.prob);

    report.gan = tape.value(value).data()[0];
    report.d_real_mean = mean(tape.value(d_real.prob).data());
    report.d_fake_mean = mean(tape.value(d_fake.prob).data());
    let u = alpha.map_or(0.4 * (config.image_size * config.image_size) as f64, |a| a.u);
    report.generators = gen
        .layers
        .iter()
        .map(|l| {
            let a = tape.value(l.alpha);
            GeneratorReport {
                alpha: (0..a.batch()).map(|i| losses::alpha_loss(a.item(i), u)).sum(),
                alpha_deviation: losses::alpha_budget_deviation(a, u),
                coverage: a.sum() / a.len() as f64,
            }
        })
        .collect();
    report.alpha = alpha.map_or(0.0, |a| a.weight * report.generators.iter().map(|g| g.alpha).sum::<f64>());
    ensure_finite(report.gan, "gan", report.iteration)?;

    let mut grads = tape.backward(value);
    let g = collect_grads(bundle, &bound, &mut grads, &groups);
    let clipped = apply_updates(bundle, &mut state.optim, &groups, &g, config.gamma_d, Direction::Ascend, report.iteration)?;
    report.clipped_updates += clipped as u32;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Coefficients of the generators' combined objective and the Adam rate they
/// are applied with: `rate * (c_gan * L_GAN + c_vae * L_VAE)`.
#[derive(Clone, Copy, Debug)]
struct GeneratorWeights {
    rate: f64,
    c_gan: f64,
    c_vae: f64,
}

impl GeneratorWeights {
    /// Algorithm 2 descends `γ_GAN·L_GAN + γ_VAE·L_VAE`. Adam is insensitive to
    /// gradient scale, so the larger of the two rates becomes the step size and
    /// the pair becomes relative weights.
    fn combined(gamma_gan: f64, gamma_vae: f64) -> Self {
        let rate = if gamma_gan > 0.0 { gamma_gan } else { gamma_vae };
        if rate == 0.0 {
            return GeneratorWeights { rate, c_gan: 1.0, c_vae: 0.0 };
        }
        GeneratorWeights {
            rate,
            c_gan: gamma_gan / rate,
            c_vae: gamma_vae / rate,
        }
    }
}

/// Values reported by a generator sub-step.
struct GeneratorTerms {
    objective: f64,
    vae: Option<[f64; 3]>,
}

/// Builds the generators' objective on a fresh tape, backpropagates, and
/// applies updates to `groups`.
#[allow(clippy::too_many_arguments)]
fn generator_update(
    config: &TrainConfig,
    alpha: Option<&AlphaLossConfig>,
    weights: GeneratorWeights,
    bundle: &mut ModelBundle,
    state: &mut TrainState,
    real: &Tensor,
    z: &[Tensor],
    eps: Option<&[Tensor]>,
    groups: &[ParamGroup],
    iteration: u64,
) -> Result<(GeneratorTerms, bool)> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape, groups);
    let zs = constants(&mut tape, z);
    let gen = bundle.generate_graph(&mut tape, &bound, &zs);
    let d_fake = bundle.discriminate_graph(&mut tape, &bound, gen.final_image());
    let gan = losses::graph::generator_objective(&mut tape, d_fake.prob, config.non_saturating);
    let mut total = if weights.c_gan == 1.0 { gan } else { tape.scale(gan, weights.c_gan) };
    if let Some(a) = alpha {
        let al = alpha_graph(&mut tape, &gen.layers, a);
        total = tape.add(total, al);
    }
    let mut vae_values = None;
    if let (Some(eps), true) = (eps, weights.c_vae > 0.0) {
        let xr = tape.constant(real.clone());
        let vae = vae_graph(bundle, &mut tape, &bound, xr, eps);
        vae_values = Some([vae.kl, vae.pixel, vae.feature].map(|v| tape.value(v).data()[0]));
        let weighted = tape.scale(vae.loss, weights.c_vae);
        total = tape.add(total, weighted);
    }
    let objective = tape.value(gan).data()[0];
    ensure_finite(objective, "gan_generator", iteration)?;
    ensure_finite(tape.value(total).data()[0], "generator_objective", iteration)?;

    let mut grads = tape.backward(total);
    let g = collect_grads(bundle, &bound, &mut grads, groups);
    let clipped = apply_updates(bundle, &mut state.optim, groups, &g, weights.rate, Direction::Descend, iteration)?;
    Ok((GeneratorTerms { objective, vae: vae_values }, clipped))
}

/// Runs the generator loop: one sub-step per generator, each also moving the
/// conditioner, or a single combined update with `single_backward`.
#[allow(clippy::too_many_arguments)]
fn generator_loop(
    config: &TrainConfig,
    alpha: Option<&AlphaLossConfig>,
    weights: GeneratorWeights,
    bundle: &mut ModelBundle,
    state: &mut TrainState,
    real: &Tensor,
    z: &[Tensor],
    eps: Option<&[Tensor]>,
    report: &mut LossReport,
) -> Result<()> {
    let plans: Vec<Vec<ParamGroup>> = if config.single_backward {
        let mut all = vec![ParamGroup::Conditioner];
        all.extend((0..config.n).map(ParamGroup::Generator));
        vec![all]
    } else {
        (0..config.n)
            .map(|i| vec![ParamGroup::Conditioner, ParamGroup::Generator(i)])
            .collect()
    };
    for groups in plans {
        let (terms, clipped) = generator_update(
            config,
            alpha,
            weights,
            bundle,
            state,
            real,
            z,
            eps,
            &groups,
            report.iteration,
        )?;
        report.gan_generator = terms.objective;
        if let Some([kl, pixel, feature]) = terms.vae {
            report.vae_kl = kl;
            report.vae_pixel = pixel;
            report.vae_feature = feature;
        }
        report.clipped_updates += clipped as u32;
    }
    Ok(())
}

fn encoder_loop(
    config: &TrainConfig,
    bundle: &mut ModelBundle,
    state: &mut TrainState,
    real: &Tensor,
    eps: &[Tensor],
    report: &mut LossReport,
) -> Result<()> {
    let plans: Vec<Vec<ParamGroup>> = if config.single_backward {
        vec![(0..config.n).map(ParamGroup::Encoder).collect()]
    } else {
        (0..config.n).map(|i| vec![ParamGroup::Encoder(i)]).collect()
    };
    for groups in plans {
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape, &groups);
        let xr = tape.constant(real.clone());
        let vae = vae_graph(bundle, &mut tape, &bound, xr, eps);
        report.vae_kl = tape.value(vae.kl).data()[0];
        report.vae_pixel = tape.value(vae.pixel).data()[0];
        report.vae_feature = tape.value(vae.feature).data()[0];
        ensure_finite(tape.value(vae.loss).data()[0], "vae", report.iteration)?;
        let mut grads = tape.backward(vae.loss);
        let g = collect_grads(bundle, &bound, &mut grads, &groups);
        let clipped = apply_updates(bundle, &mut state.optim, &groups, &g, config.gamma_e, Direction::Descend, report.iteration)?;
        report.clipped_updates += clipped as u32;
    }
    Ok(())
}

fn finish(state: &mut TrainState, report: LossReport) -> Result<LossReport> {
    if let Some(term) = report.non_finite_term() {
        return Err(CganError::NonFinite {
            term,
            iteration: report.iteration,
        });
    }
    state.iteration = report.iteration;
    state.history.push(report.clone());
    Ok(report)
}

/// One iteration of the adversarial loop: draw one noise set, take an ascent
/// step on the discriminator, then a descent step on each generator in order
/// (with the conditioner), adding the alpha loss for `cgan-a`.
pub fn train_step_cgan(
    config: &TrainConfig,
    bundle: &mut ModelBundle,
    state: &mut TrainState,
    batch: &Tensor,
) -> Result<LossReport> {
    if config.variant.has_encoders() {
        return Err(CganError::Config(format!(
            "train_step_cgan needs cgan or cgan-a, got {}",
            config.variant
        )));
    }
    check_batch(config, batch)?;
    let alpha = config.alpha()?;
    let mut report = LossReport {
        iteration: state.iteration + 1,
        ..LossReport::default()
    };
    let z = bundle.sample_latents(batch.batch(), &mut state.rng)?;
    discriminator_step(config, alpha.as_ref(), bundle, state, batch, &z, &mut report)?;
    let weights = GeneratorWeights {
        rate: config.gamma_g,
        c_gan: 1.0,
        c_vae: 0.0,
    };
    generator_loop(config, alpha.as_ref(), weights, bundle, state, batch, &z, None, &mut report)?;
    finish(state, report)
}

/// One iteration of the variational loop: the discriminator step as in
/// [`train_step_cgan`], generators descending the weighted sum of the
/// adversarial and variational losses, then each encoder descending the
/// variational loss.
pub fn train_step_cgan_vae(
    config: &TrainConfig,
    bundle: &mut ModelBundle,
    state: &mut TrainState,
    batch: &Tensor,
) -> Result<LossReport> {
    if !config.variant.has_encoders() {
        return Err(CganError::Config(format!(
            "train_step_cgan_vae needs cgan-vae or cgan-vae-a, got {}",
            config.variant
        )));
    }
    check_batch(config, batch)?;
    let alpha = config.alpha()?;
    let mut report = LossReport {
        iteration: state.iteration + 1,
        ..LossReport::default()
    };
    let b = batch.batch();
    let z = bundle.sample_latents(b, &mut state.rng)?;
    discriminator_step(config, alpha.as_ref(), bundle, state, batch, &z, &mut report)?;
    let eps: Vec<Tensor> = (0..config.n)
        .map(|_| standard_normal(&[b, config.latent_dim], &mut state.rng))
        .collect();
    let weights = GeneratorWeights::combined(config.gamma_g_gan, config.gamma_g_vae);
    generator_loop(config, alpha.as_ref(), weights, bundle, state, batch, &z, Some(&eps), &mut report)?;
    encoder_loop(config, bundle, state, batch, &eps, &mut report)?;
    finish(state, report)
}

/// The adversarial value on a real batch and a fixed noise set, without any update.
pub fn gan_value(bundle: &ModelBundle, real: &Tensor, z: &[Tensor]) -> Result<f64> {
    if z.len() != bundle.architecture().generators {
        return Err(CganError::Dimension(format!(
            "need {} latent batches, got {}",
            bundle.architecture().generators,
            z.len()
        )));
    }
    let fake = bundle.forward_generate(z)?;
    let d_real = bundle.discriminate(&crate::compositor::Composite::new(real.clone())?)?;
    let d_fake = bundle.discriminate(fake.final_image())?;
    losses::gan_loss(&d_real.prob, &d_fake.prob)
}

/// Hooks invoked by [`Trainer::fit`].
pub trait TrainObserver {
    fn on_report(&mut self, _report: &LossReport) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` iterations and after the last one.
    fn on_checkpoint(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// A model, its optimizer state and the configuration driving both.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    bundle: ModelBundle,
    state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct SavedRng {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    config: TrainConfig,
    iteration: u64,
    rng: SavedRng,
    adam_steps: BTreeMap<String, u64>,
    history: Vec<LossReport>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::new(config.architecture(), config.seed)?;
        let state = TrainState::new(&config);
        Ok(Trainer { config, bundle, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn bundle_mut(&mut self) -> &mut ModelBundle {
        &mut self.bundle
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn history(&self) -> &[LossReport] {
        &self.state.history
    }

    pub fn into_parts(self) -> (ModelBundle, TrainState) {
        (self.bundle, self.state)
    }

    /// Picks a minibatch uniformly at random, without replacement unless the
    /// dataset is smaller than `m`.
    pub fn select_batch(&mut self, dataset: &Tensor) -> Tensor {
        let n = dataset.batch();
        let m = self.config.m;
        let indices: Vec<usize> = if n >= m {
            sample(&mut self.state.rng, n, m).into_vec()
        } else {
            (0..m).map(|_| self.state.rng.random_range(0..n)).collect()
        };
        dataset.gather(&indices)
    }

    /// One iteration on a batch drawn from `dataset`.
    pub fn step(&mut self, dataset: &Tensor) -> Result<LossReport> {
        check_batch(&self.config, dataset)?;
        let batch = self.select_batch(dataset);
        self.step_on_batch(&batch)
    }

    /// One iteration on a caller-provided minibatch.
    pub fn step_on_batch(&mut self, batch: &Tensor) -> Result<LossReport> {
        if self.config.variant.has_encoders() {
            train_step_cgan_vae(&self.config, &mut self.bundle, &mut self.state, batch)
        } else {
            train_step_cgan(&self.config, &mut self.bundle, &mut self.state, batch)
        }
    }

    /// Trains until `config.iterations` iterations have completed.
    pub fn fit(&mut self, dataset: &Tensor, observer: &mut dyn TrainObserver) -> Result<()> {
        if dataset.is_empty() {
            return Err(CganError::Argument("dataset is empty".into()));
        }
        check_batch(&self.config, dataset)?;
        let every = self.config.checkpoint_every;
        while self.state.iteration < self.config.iterations {
            let report = self.step(dataset)?;
            log::debug!("{}", report.to_json_line());
            observer.on_report(&report)?;
            let it = self.state.iteration;
            if (every > 0 && it.is_multiple_of(every)) || it == self.config.iterations {
                observer.on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    /// Extends the iteration target, e.g. after resuming.
    pub fn set_iterations(&mut self, iterations: u64) {
        self.config.iterations = iterations;
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let rng = &self.state.rng;
        let saved = SavedState {
            config: self.config.clone(),
            iteration: self.state.iteration,
            rng: SavedRng {
                seed: rng.get_seed(),
                stream: rng.get_stream(),
                word_pos: rng.get_word_pos().to_string(),
            },
            adam_steps: self
                .state
                .optim
                .groups()
                .map(|(g, m)| (g.to_string(), m.step))
                .collect(),
            history: self.state.history.clone(),
        };
        let state = serde_json::to_value(&saved)
            .map_err(|e| CganError::Checkpoint(format!("trainer state encoding: {e}")))?;
        let mut tensors = self.bundle.named_tensors();
        for (g, m) in self.state.optim.groups() {
            for ((name, _), (mt, vt)) in self.bundle.params(g).iter().zip(m.m.iter().zip(&m.v)) {
                tensors.push((format!("adam.m/{g}/{name}"), mt.clone()));
                tensors.push((format!("adam.v/{g}/{name}"), vt.clone()));
            }
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                architecture: *self.bundle.architecture(),
                state: Some(state),
            },
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let value = ckpt
            .header
            .state
            .clone()
            .ok_or_else(|| CganError::Checkpoint("checkpoint has no trainer state".into()))?;
        let saved: SavedState = serde_json::from_value(value)
            .map_err(|e| CganError::Checkpoint(format!("trainer state: {e}")))?;
        saved.config.validate()?;
        if saved.config.architecture() != ckpt.header.architecture {
            return Err(CganError::Checkpoint(
                "trainer configuration disagrees with the stored architecture".into(),
            ));
        }
        let bundle = ModelBundle::from_checkpoint(ckpt)?;
        let mut rng = ChaCha8Rng::from_seed(saved.rng.seed);
        rng.set_stream(saved.rng.stream);
        let word_pos: u128 = saved
            .rng
            .word_pos
            .parse()
            .map_err(|_| CganError::Checkpoint("bad rng position".into()))?;
        rng.set_word_pos(word_pos);

        let map = ckpt.tensor_map();
        let mut optim = Adam::new(saved.config.adam());
        for g in bundle.groups() {
            let Some(&step) = saved.adam_steps.get(&g.to_string()) else {
                continue;
            };
            let mut moments = Moments { step, m: Vec::new(), v: Vec::new() };
            for (name, p) in bundle.params(g).iter() {
                for (kind, dst) in [("m", &mut moments.m), ("v", &mut moments.v)] {
                    let key = format!("adam.{kind}/{g}/{name}");
                    let t = map
                        .get(key.as_str())
                        .ok_or_else(|| CganError::Checkpoint(format!("missing tensor `{key}`")))?;
                    if t.shape() != p.shape() {
                        return Err(CganError::Checkpoint(format!("tensor `{key}` has the wrong shape")));
                    }
                    dst.push((*t).clone());
                }
            }
            optim.insert_moments(g, moments);
        }
        Ok(Trainer {
            config: saved.config,
            bundle,
            state: TrainState {
                iteration: saved.iteration,
                optim,
                rng,
                history: saved.history,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn resume(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Trains a fresh model under `config` and returns the final parameters and state.
pub fn fit(
    config: TrainConfig,
    dataset: &Tensor,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelBundle, TrainState)> {
    let mut trainer = Trainer::new(config)?;
    trainer.fit(dataset, observer)?;
    Ok(trainer.into_parts())
}

#[cfg(test)]
mod tests;
