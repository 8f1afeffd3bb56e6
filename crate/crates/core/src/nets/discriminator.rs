//! Strided convolutional trunk shared in shape (not weights) by the
//! discriminator and the encoders.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::nets::params::{ConvParams, NormParams, ParamSet};

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// Four stride-2 convolutions with leaky rectifiers; no normalization on the
/// input stage.
#[derive(Clone, Debug)]
pub(crate) struct ConvTrunk {
    stages: Vec<(ConvParams, Option<NormParams>)>,
    pub feature_len: usize,
}

impl ConvTrunk {
    pub fn new(params: &mut ParamSet, image_size: usize, width: usize, rng: &mut impl Rng) -> Self {
        let channels = [3, width, width * 2, width * 4, width * 8];
        let stages = channels
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let name = format!("conv{}", i + 1);
                let conv = ConvParams::conv(params, &name, pair[0], pair[1], rng);
                let norm = (i > 0).then(|| NormParams::new(params, &format!("{name}.bn"), pair[1], rng));
                (conv, norm)
            })
            .collect();
        let extent = image_size / 16;
        ConvTrunk {
            stages,
            feature_len: width * 8 * extent * extent,
        }
    }

    /// Returns the flattened activations of the last convolutional stage, `[B, feature_len]`.
    pub fn graph(&self, tape: &mut Tape, v: &[Var], x: Var) -> Var {
        let batch = tape.shape(x)[0];
        let mut x = x;
        for (conv, norm) in &self.stages {
            x = conv.apply_conv(tape, v, x);
            if let Some(norm) = norm {
                x = norm.apply(tape, v, x);
            }
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        tape.reshape(x, &[batch, self.feature_len])
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub(crate) params: ParamSet,
    trunk: ConvTrunk,
    head: ConvParams,
}

/// Discriminator outputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    /// `[B]` probabilities of being real.
    pub prob: Var,
    /// `[B, feature_len]` activations of the last convolutional layer.
    pub feature: Var,
}

impl Discriminator {
    pub fn new(image_size: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let trunk = ConvTrunk::new(&mut params, image_size, width, rng);
        let head = ConvParams::linear(&mut params, "head", trunk.feature_len, 1, rng);
        Discriminator { params, trunk, head }
    }

    pub fn feature_len(&self) -> usize {
        self.trunk.feature_len
    }

    pub fn graph(&self, tape: &mut Tape, v: &[Var], x: Var) -> DiscriminatorVars {
        let batch = tape.shape(x)[0];
        let feature = self.trunk.graph(tape, v, x);
        let logit = self.head.apply_linear(tape, v, feature);
        let logit = tape.reshape(logit, &[batch]);
        let prob = tape.sigmoid(logit);
        DiscriminatorVars { prob, feature }
    }
}
