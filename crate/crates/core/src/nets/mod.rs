//! The networks of a composite GAN and the bundle that owns their parameters.
//!
//! All forward passes exist twice: `*_graph` methods record onto a [`Tape`]
//! for training, and the plain methods on [`ModelBundle`] run a throwaway tape
//! with frozen parameters and return values.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::compositor::graph::{self as blend, LayerVars};
use crate::compositor::{Composite, LayerImage, Stack};
use crate::error::{CganError, Result};
use crate::tensor::Tensor;

pub mod checkpoint;
mod conditioner;
mod discriminator;
mod encoder;
mod generator;
mod params;

pub use conditioner::{Conditioner, ConditionerState, StateVars};
pub use discriminator::{Discriminator, DiscriminatorVars};
pub use encoder::{reparameterize_graph, Encoder, EncoderVars};
pub use generator::Generator;
pub use params::{ParamSet, INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "cgan")]
    Cgan,
    #[serde(rename = "cgan-a")]
    CganA,
    #[serde(rename = "cgan-vae")]
    CganVae,
    #[serde(rename = "cgan-vae-a")]
    CganVaeA,
}

impl Variant {
    pub fn has_alpha_loss(self) -> bool {
        matches!(self, Variant::CganA | Variant::CganVaeA)
    }

    pub fn has_encoders(self) -> bool {
        matches!(self, Variant::CganVae | Variant::CganVaeA)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cgan => "cgan",
            Variant::CganA => "cgan-a",
            Variant::CganVae => "cgan-vae",
            Variant::CganVaeA => "cgan-vae-a",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = CganError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cgan" => Ok(Variant::Cgan),
            "cgan-a" => Ok(Variant::CganA),
            "cgan-vae" => Ok(Variant::CganVae),
            "cgan-vae-a" => Ok(Variant::CganVaeA),
            other => Err(CganError::Argument(format!(
                "unknown variant `{other}` (expected cgan, cgan-a, cgan-vae or cgan-vae-a)"
            ))),
        }
    }
}

/// Architecture metadata; everything needed to rebuild parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: Variant,
    pub generators: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub image_size: usize,
    pub generator_width: usize,
    pub discriminator_width: usize,
    pub encoder_width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            variant: Variant::Cgan,
            generators: 2,
            latent_dim: 64,
            hidden_dim: 128,
            image_size: 64,
            generator_width: 64,
            discriminator_width: 64,
            encoder_width: 64,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("generators", self.generators),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("generator_width", self.generator_width),
            ("discriminator_width", self.discriminator_width),
            ("encoder_width", self.encoder_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CganError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return Err(CganError::Config(format!(
                "image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Pixels per layer.
    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// Identifies one independently optimized parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Conditioner,
    Generator(usize),
    Discriminator,
    Encoder(usize),
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Conditioner => write!(f, "conditioner"),
            ParamGroup::Generator(i) => write!(f, "generator.{i}"),
            ParamGroup::Discriminator => write!(f, "discriminator"),
            ParamGroup::Encoder(i) => write!(f, "encoder.{i}"),
        }
    }
}

/// The latent sequence `z_1..z_n` (each `[B, latent_dim]`) and the conditioner
/// states derived from it.
#[derive(Clone, Debug)]
pub struct LatentSeq {
    pub z: Vec<Tensor>,
    pub h: Vec<ConditionerState>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// Per-item probability of being real, strictly inside (0, 1).
    pub prob: Vec<f64>,
    /// `[B, F]` activations of the last convolutional layer.
    pub feature: Tensor,
}

/// Parameters of `q(z | x) = N(mu, diag(exp(logvar)))`, each `[B, latent_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Everything [`ModelBundle::forward_generate`] produces.
#[derive(Clone, Debug)]
pub struct Generated {
    pub latents: LatentSeq,
    pub layers: Vec<LayerImage>,
    pub stack: Stack,
}

impl Generated {
    pub fn final_image(&self) -> &Composite {
        self.stack.final_image()
    }
}

/// Parameters bound onto a tape, grouped like the bundle.
#[derive(Clone, Debug)]
pub struct BoundBundle {
    pub conditioner: Vec<Var>,
    pub generators: Vec<Vec<Var>>,
    pub discriminator: Vec<Var>,
    pub encoders: Vec<Vec<Var>>,
}

impl BoundBundle {
    pub fn vars(&self, group: ParamGroup) -> &[Var] {
        match group {
            ParamGroup::Conditioner => &self.conditioner,
            ParamGroup::Generator(i) => &self.generators[i],
            ParamGroup::Discriminator => &self.discriminator,
            ParamGroup::Encoder(i) => &self.encoders[i],
        }
    }
}

/// The generator side of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct GeneratedVars {
    pub states: Vec<StateVars>,
    pub layers: Vec<LayerVars>,
    /// `O(1)..O(n)`; the last entry is the final composite.
    pub intermediates: Vec<Var>,
}

impl GeneratedVars {
    pub fn final_image(&self) -> Var {
        *self.intermediates.last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    arch: Architecture,
    conditioner: Conditioner,
    generators: Vec<Generator>,
    discriminator: Discriminator,
    encoders: Vec<Encoder>,
}

/// `count` i.i.d. standard-normal vectors of length `latent_dim`, as `[count, latent_dim]`.
pub fn sample_prior(count: usize, latent_dim: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if count == 0 || latent_dim == 0 {
        return Err(CganError::Argument(format!(
            "sample_prior needs count and latent_dim >= 1, got {count} and {latent_dim}"
        )));
    }
    Ok(Tensor::from_fn(&[count, latent_dim], |_| {
        StandardNormal.sample(rng)
    }))
}

/// `z = mu + exp(logvar / 2) * eps`
pub fn reparameterize(enc: &EncoderOutput, eps: &Tensor) -> Result<Tensor> {
    if enc.mu.shape() != eps.shape() || enc.logvar.shape() != eps.shape() {
        return Err(CganError::Dimension(format!(
            "mu {:?}, logvar {:?} and eps {:?} must agree",
            enc.mu.shape(),
            enc.logvar.shape(),
            eps.shape()
        )));
    }
    let data = enc
        .mu
        .data()
        .iter()
        .zip(enc.logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(eps.shape(), data)
}

impl ModelBundle {
    /// Freshly initialized parameters, drawn from one seeded stream in the
    /// order conditioner, generators, discriminator, encoders.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conditioner = Conditioner::new(arch.latent_dim, arch.hidden_dim, &mut rng);
        let generators = (0..arch.generators)
            .map(|_| Generator::new(arch.hidden_dim, arch.image_size, arch.generator_width, &mut rng))
            .collect();
        let discriminator = Discriminator::new(arch.image_size, arch.discriminator_width, &mut rng);
        let encoders = if arch.variant.has_encoders() {
            (0..arch.generators)
                .map(|_| Encoder::new(arch.image_size, arch.encoder_width, arch.latent_dim, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(ModelBundle {
            arch,
            conditioner,
            generators,
            discriminator,
            encoders,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.conditioner
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Conditioner];
        g.extend((0..self.generators.len()).map(ParamGroup::Generator));
        g.push(ParamGroup::Discriminator);
        g.extend((0..self.encoders.len()).map(ParamGroup::Encoder));
        g
    }

    pub fn params(&self, group: ParamGroup) -> &ParamSet {
        match group {
            ParamGroup::Conditioner => &self.conditioner.params,
            ParamGroup::Generator(i) => &self.generators[i].params,
            ParamGroup::Discriminator => &self.discriminator.params,
            ParamGroup::Encoder(i) => &self.encoders[i].params,
        }
    }

    pub fn params_mut(&mut self, group: ParamGroup) -> &mut ParamSet {
        match group {
            ParamGroup::Conditioner => &mut self.conditioner.params,
            ParamGroup::Generator(i) => &mut self.generators[i].params,
            ParamGroup::Discriminator => &mut self.discriminator.params,
            ParamGroup::Encoder(i) => &mut self.encoders[i].params,
        }
    }

    /// Binds every parameter set; groups listed in `trainable` receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &[ParamGroup]) -> BoundBundle {
        let mut bind = |g: ParamGroup| self.params(g).bind(tape, trainable.contains(&g));
        BoundBundle {
            conditioner: bind(ParamGroup::Conditioner),
            generators: (0..self.generators.len())
                .map(|i| bind(ParamGroup::Generator(i)))
                .collect(),
            discriminator: bind(ParamGroup::Discriminator),
            encoders: (0..self.encoders.len())
                .map(|i| bind(ParamGroup::Encoder(i)))
                .collect(),
        }
    }

    pub fn generate_graph(&self, tape: &mut Tape, bound: &BoundBundle, zs: &[Var]) -> GeneratedVars {
        assert_eq!(zs.len(), self.generators.len(), "one latent per generator");
        let states = self.conditioner.unroll_graph(tape, &bound.conditioner, zs);
        let layers: Vec<LayerVars> = self
            .generators
            .iter()
            .zip(&bound.generators)
            .zip(&states)
            .map(|((g, v), s)| g.graph(tape, v, s.hidden))
            .collect();
        let intermediates = blend::compose_stack(tape, &layers);
        GeneratedVars {
            states,
            layers,
            intermediates,
        }
    }

    pub fn discriminate_graph(&self, tape: &mut Tape, bound: &BoundBundle, x: Var) -> DiscriminatorVars {
        self.discriminator.graph(tape, &bound.discriminator, x)
    }

    pub fn encode_graph(&self, tape: &mut Tape, bound: &BoundBundle, index: usize, x: Var) -> EncoderVars {
        self.encoders[index].graph(tape, &bound.encoders[index], x)
    }

    /// Draws one latent batch `[batch, latent_dim]` per generator.
    pub fn sample_latents(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
        (0..self.arch.generators)
            .map(|_| sample_prior(batch, self.arch.latent_dim, rng))
            .collect()
    }

    fn check_index(&self, index: usize, what: &str, count: usize) -> Result<()> {
        if index >= count {
            return Err(CganError::Argument(format!(
                "{what} index {index} out of range (have {count})"
            )));
        }
        Ok(())
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let s = self.arch.image_size;
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != s || w != s {
            return Err(CganError::Dimension(format!(
                "expected [B, 3, {s}, {s}] images, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Runs generator `index` on a conditioner state.
    pub fn generate_layer(&self, index: usize, h: &ConditionerState) -> Result<LayerImage> {
        self.check_index(index, "generator", self.generators.len())?;
        if h.hidden.shape() != [h.batch(), self.arch.hidden_dim] {
            return Err(CganError::Dimension(format!(
                "conditioner state must be [B, {}], got {:?}",
                self.arch.hidden_dim,
                h.hidden.shape()
            )));
        }
        if !h.hidden.all_finite() {
            return Err(CganError::Domain("conditioner state is not finite".into()));
        }
        let mut tape = Tape::new();
        let v = self.generators[index].params.bind(&mut tape, false);
        let hv = tape.constant(h.hidden.clone());
        let out = self.generators[index].graph(&mut tape, &v, hv);
        LayerImage::new(tape.value(out.rgb).clone(), tape.value(out.alpha).clone())
    }

    pub fn discriminate(&self, x: &Composite) -> Result<DiscriminatorOutput> {
        self.check_image(x.rgb())?;
        let mut tape = Tape::new();
        let v = self.discriminator.params.bind(&mut tape, false);
        let xv = tape.constant(x.rgb().clone());
        let out = self.discriminator.graph(&mut tape, &v, xv);
        Ok(DiscriminatorOutput {
            prob: tape.value(out.prob).data().to_vec(),
            feature: tape.value(out.feature).clone(),
        })
    }

    pub fn encode(&self, index: usize, x: &Composite) -> Result<EncoderOutput> {
        if !self.arch.variant.has_encoders() {
            return Err(CganError::Config(format!(
                "variant {} has no encoders; encoding needs cgan-vae or cgan-vae-a",
                self.arch.variant
            )));
        }
        self.check_index(index, "encoder", self.encoders.len())?;
        self.check_image(x.rgb())?;
        let mut tape = Tape::new();
        let v = self.encoders[index].params.bind(&mut tape, false);
        let xv = tape.constant(x.rgb().clone());
        let out = self.encoders[index].graph(&mut tape, &v, xv);
        Ok(EncoderOutput {
            mu: tape.value(out.mu).clone(),
            logvar: tape.value(out.logvar).clone(),
        })
    }

    /// Conditioner, every generator and the compositor, from `z_1..z_n`.
    pub fn forward_generate(&self, z: &[Tensor]) -> Result<Generated> {
        if z.len() != self.arch.generators {
            return Err(CganError::Dimension(format!(
                "need {} latent batches, got {}",
                self.arch.generators,
                z.len()
            )));
        }
        let batch = z[0].batch();
        for zi in z {
            if zi.shape() != [batch, self.arch.latent_dim] {
                return Err(CganError::Dimension(format!(
                    "latents must be [{batch}, {}], got {:?}",
                    self.arch.latent_dim,
                    zi.shape()
                )));
            }
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let zs: Vec<Var> = z.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.generate_graph(&mut tape, &bound, &zs);
        let layers = out
            .layers
            .iter()
            .map(|l| LayerImage::new(tape.value(l.rgb).clone(), tape.value(l.alpha).clone()))
            .collect::<Result<Vec<_>>>()?;
        let intermediates = out
            .intermediates
            .iter()
            .map(|&o| Composite::new_unchecked_range(tape.value(o).clone()))
            .collect::<Result<Vec<_>>>()?;
        let h = out
            .states
            .iter()
            .map(|s| ConditionerState {
                hidden: tape.value(s.hidden).clone(),
                cell: tape.value(s.cell).clone(),
            })
            .collect();
        Ok(Generated {
            latents: LatentSeq { z: z.to_vec(), h },
            layers,
            stack: Stack { intermediates },
        })
    }
}
