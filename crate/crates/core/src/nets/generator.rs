//! RGBA layer generator: a projected conditioner state followed by four
//! fractionally strided convolutions, each doubling the spatial extent.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::compositor::graph::LayerVars;
use crate::nets::params::{ConvParams, NormParams, ParamSet};

#[derive(Clone, Debug)]
pub struct Generator {
    pub(crate) params: ParamSet,
    project: ConvParams,
    project_norm: NormParams,
    ups: Vec<(ConvParams, Option<NormParams>)>,
    base_channels: usize,
    base_extent: usize,
}

impl Generator {
    /// `width` is the channel count of the last hidden stage; earlier stages
    /// use 2×, 4× and 8× that.
    pub fn new(hidden_dim: usize, image_size: usize, width: usize, rng: &mut impl Rng) -> Self {
        let base_extent = image_size / 16;
        let base_channels = width * 8;
        let mut params = ParamSet::new();
        let project = ConvParams::linear(
            &mut params,
            "project",
            hidden_dim,
            base_channels * base_extent * base_extent,
            rng,
        );
        let project_norm = NormParams::new(&mut params, "project.bn", base_channels, rng);
        let channels = [base_channels, width * 4, width * 2, width, 4];
        let ups = channels
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let name = format!("up{}", i + 1);
                let conv = ConvParams::conv_transpose(&mut params, &name, pair[0], pair[1], rng);
                // no normalization on the output stage
                let norm = (i < 3).then(|| NormParams::new(&mut params, &format!("{name}.bn"), pair[1], rng));
                (conv, norm)
            })
            .collect();
        Generator {
            params,
            project,
            project_norm,
            ups,
            base_channels,
            base_extent,
        }
    }

    /// Maps `h` (`[B, hidden_dim]`) to an RGBA layer. RGB goes through
    /// `(tanh + 1) / 2`, alpha through a sigmoid.
    pub fn graph(&self, tape: &mut Tape, v: &[Var], h: Var) -> LayerVars {
        let batch = tape.shape(h)[0];
        let x = self.project.apply_linear(tape, v, h);
        let x = tape.reshape(x, &[batch, self.base_channels, self.base_extent, self.base_extent]);
        let x = self.project_norm.apply(tape, v, x);
        let mut x = tape.relu(x);
        for (conv, norm) in &self.ups {
            x = conv.apply_conv_transpose(tape, v, x);
            if let Some(norm) = norm {
                x = norm.apply(tape, v, x);
                x = tape.relu(x);
            }
        }
        let rgb = tape.slice_channels(x, 0, 3);
        let rgb = tape.tanh(rgb);
        let rgb = tape.affine(rgb, 0.5, 0.5);
        let alpha = tape.slice_channels(x, 3, 1);
        let alpha = tape.sigmoid(alpha);
        LayerVars { rgb, alpha }
    }
}
