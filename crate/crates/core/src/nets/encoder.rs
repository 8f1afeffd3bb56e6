//! Variational encoder: a strided convolutional trunk and a linear head
//! producing the mean and log-variance of a diagonal Gaussian.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::nets::discriminator::ConvTrunk;
use crate::nets::params::{ConvParams, ParamSet};

#[derive(Clone, Debug)]
pub struct Encoder {
    pub(crate) params: ParamSet,
    trunk: ConvTrunk,
    head: ConvParams,
    latent_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub mu: Var,
    pub logvar: Var,
}

impl Encoder {
    pub fn new(image_size: usize, width: usize, latent_dim: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let trunk = ConvTrunk::new(&mut params, image_size, width, rng);
        let head = ConvParams::linear(&mut params, "head", trunk.feature_len, 2 * latent_dim, rng);
        Encoder {
            params,
            trunk,
            head,
            latent_dim,
        }
    }

    pub fn graph(&self, tape: &mut Tape, v: &[Var], x: Var) -> EncoderVars {
        let feature = self.trunk.graph(tape, v, x);
        let out = self.head.apply_linear(tape, v, feature);
        EncoderVars {
            mu: tape.slice_channels(out, 0, self.latent_dim),
            logvar: tape.slice_channels(out, self.latent_dim, self.latent_dim),
        }
    }
}

/// `z = mu + exp(logvar / 2) * eps`
pub fn reparameterize_graph(tape: &mut Tape, enc: EncoderVars, eps: Var) -> Var {
    let half = tape.scale(enc.logvar, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(std, eps);
    tape.add(enc.mu, noise)
}
